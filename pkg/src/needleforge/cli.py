"""needleforge command-line interface."""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import data, evaluation, models, serve, training
from .models import CapabilityError, ModelFormatError
from .numerics import ContractError, DimensionError

EXIT_OK, EXIT_USAGE, EXIT_FORMAT, EXIT_RUNTIME = 0, 2, 3, 4


def _threads() -> int:
    raw = os.environ.get("NEEDLEFORGE_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ContractError(f"NEEDLEFORGE_THREADS must be an integer, got {raw!r}") from None


def _profile(spec: str) -> data.NeedleProfile:
    """A preset name, or a path to a JSON file with NeedleProfile fields."""
    if spec in data.PROFILES:
        return data.PROFILES[spec]
    path = Path(spec)
    if path.suffix == ".json" and path.exists():
        fields = json.loads(path.read_text())
        fields.setdefault("name", path.stem)
        return data.NeedleProfile(**fields)
    raise ContractError(f"unknown profile {spec!r}; use soft, medium, stiff or a JSON file")


def _split_tagged(ds: data.Dataset) -> tuple[data.Dataset, data.Dataset]:
    if ds.tags is None:
        return data.split(ds)
    return ds.subset(np.flatnonzero(ds.tags == "train")), ds.subset(np.flatnonzero(ds.tags == "test"))


def _tagged_dataset(ds: data.Dataset, train_frac: float = 0.8) -> data.Dataset:
    train, test = data.split(ds, train_frac)
    merged = data.Dataset(ds.scans, np.concatenate([train.anchors, test.anchors]),
                          np.concatenate([train.forces, test.forces]), ds.t_s, ds.profile,
                          ["train"] * len(train) + ["test"] * len(test))
    merged.profile["split"] = {"train": len(train), "test": len(test), "train_frac": train_frac}
    return merged


def _check_out(path: str | None) -> Path:
    if not path:
        raise ContractError("--out is required")
    out = Path(path)
    if not out.parent.exists():
        raise ContractError(f"output directory {out.parent} does not exist")
    return out


def _spec(args, t_s: int, d_c: int, kind: str | None = None) -> models.ArchSpec:
    return models.ArchSpec(kind or args.arch, t_s=t_s, d_c=d_c, seed=args.seed)


def _config(args) -> training.TrainConfig:
    overrides = {"seed": args.seed}
    if args.epochs is not None:
        overrides["max_epochs"] = args.epochs
    if args.batch is not None:
        overrides["batch_size"] = args.batch
    if args.lr is not None:
        overrides["lr0"] = args.lr
    if args.halve_every is not None:
        overrides["halve_every"] = args.halve_every
    return training.desk_config(**overrides)


def cmd_simulate(args) -> int:
    out = _check_out(args.out)
    profile = _profile(args.profile)
    ds = data.build_dataset(profile, args.duration, args.ts, args.seed, args.dc, args.stride)
    tagged = _tagged_dataset(ds)
    data.save_dataset(tagged, out)
    split = tagged.profile["split"]
    print(f"wrote {out}: {len(tagged)} windows (train {split['train']}, test {split['test']}), "
          f"t_s={args.ts}, d_c={args.dc}, seed={args.seed}")
    return EXIT_OK


def cmd_train(args) -> int:
    out = _check_out(args.out)
    ds = data.load_dataset(args.data)
    train_set, _ = _split_tagged(ds)
    model = models.build(_spec(args, ds.t_s, ds.d_c))
    cfg = _config(args)
    log = (lambda msg: print(msg, file=sys.stderr)) if args.verbose else None
    model, history = training.train(model, train_set, cfg, log)
    model.metadata["dataset"] = {"path": Path(args.data).name, "seed": ds.profile.get("seed")}
    models.save(model, out)
    hist_path = out.with_name(out.name + ".history.csv")
    hist_path.write_text(history.to_csv())
    print(f"wrote {out} and {hist_path}: {len(history)} epochs, final val MAE {history.val_mae[-1]:.4g} mN")
    return EXIT_OK


def _predict_all(named: dict, windows: np.ndarray) -> dict:
    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        futures = {name: pool.submit(m.predict, windows) for name, m in named.items()}
        return {name: f.result() for name, f in futures.items()}


def cmd_evaluate(args) -> int:
    ds = data.load_dataset(args.data)
    _, test = _split_tagged(ds)
    model = models.load(args.model)
    _check_compatible(model, test)
    pred = model.predict(test.windows())
    m, s = evaluation.mae(pred, test.forces)
    rm, rs = evaluation.rmae(pred, test.forces)
    cc = evaluation.pearson_cc(pred, test.forces)
    print(f"{models.DISPLAY_NAMES[model.kind]}: MAE {m:.3f} ± {s:.3f} mN, rMAE {rm:.4f} ± {rs:.4f}, "
          f"CC {cc:.5f} on {len(test)} test windows")
    return EXIT_OK


def _check_compatible(model: models.Model, ds: data.Dataset) -> None:
    if model.spec.d_c != ds.d_c or (model.kind not in ("cnn1d", "mip_gpm") and model.spec.t_s != ds.t_s):
        raise ContractError(f"model (t_s={model.spec.t_s}, d_c={model.spec.d_c}) does not match dataset "
                            f"(t_s={ds.t_s}, d_c={ds.d_c})")


def cmd_compare(args) -> int:
    out = _check_out(args.out)
    ds = data.load_dataset(args.data)
    _, test = _split_tagged(ds)
    named = {}
    for path in args.models:
        model = models.load(path)
        _check_compatible(model, test)
        name = models.DISPLAY_NAMES[model.kind]
        if name in named:
            name = f"{name} ({Path(path).stem})"
        named[name] = model
    windows = test.windows()
    preds = _predict_all(named, windows)
    report = evaluation.compare_models(named, windows, test.forces, args.reps, predictions=preds)
    out.write_text(report.to_csv())
    out.with_suffix(".json").write_text(report.to_json())
    out.with_name(out.stem + ".boxplot.csv").write_text(report.boxplot_csv())
    out.with_name(out.stem + ".timing.csv").write_text(report.timing_csv())
    print(report.table())
    return EXIT_OK


def cmd_sweep(args) -> int:
    out = _check_out(args.out)
    ts_values = sorted({int(v) for v in args.ts_values.split(",")})
    if not ts_values or ts_values[0] < 1:
        raise ContractError("--ts-values needs positive integers")
    rows = sweep_ts(_profile(args.profile), args.duration, ts_values, args.arch.split(","), args.seed,
                    args.dc, args.stride, _config(args))
    with out.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t_s", "arch", "val_mae", "train_seconds", "seed"])
        for r in rows:
            w.writerow([r["t_s"], r["arch"], f"{r['val_mae']:.6g}", f"{r['train_seconds']:.3f}", r["seed"]])
    for r in rows:
        print(f"t_s={r['t_s']:>4} {r['arch']:<18} val MAE {r['val_mae']:.3f} mN  train {r['train_seconds']:.1f} s")
    return EXIT_OK


def sweep_ts(profile: data.NeedleProfile, duration: float, ts_values, archs, seed: int, d_c: int,
             stride: int, config: training.TrainConfig) -> list[dict]:
    """Validation MAE and training time per (t_s, arch), all windows anchored on the same pairs."""
    session = data.simulate_session(profile, duration, np.random.default_rng(seed), d_c)
    rows = []
    for t_s in ts_values:
        ds = data.session_dataset(session, t_s, stride, min_history=max(ts_values) - 1)
        train_set, _ = data.split(ds)
        for arch in archs:
            model = models.build(models.ArchSpec(arch, t_s=t_s, d_c=d_c, seed=seed))
            t0 = time.perf_counter()
            model, history = training.train(model, train_set, config)
            rows.append({"t_s": t_s, "arch": arch, "val_mae": history.val_mae[-1],
                         "train_seconds": time.perf_counter() - t0, "seed": seed})
    return rows


def cmd_bench(args) -> int:
    model = models.load(args.model)
    if args.data:
        sample = data.load_dataset(args.data).windows([0])[0]
    else:
        rows = 1 if model.kind in ("cnn1d", "mip_gpm") else model.spec.t_s
        sample = np.random.default_rng(args.seed).random((rows, model.spec.d_c)).astype(np.float32)
    mean, std = evaluation.time_inference(model, sample, args.reps)
    print(f"{models.DISPLAY_NAMES[model.kind]}: {mean:.3f} ± {std:.3f} ms over {args.reps} passes")
    return EXIT_OK


def cmd_serve(args) -> int:
    model = models.load(args.model)
    server = serve.ForceServer(model, serve.parse_address(args.addr))
    host, port = server.address
    print(f"serving {models.DISPLAY_NAMES[model.kind]} on {host}:{port}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return EXIT_OK


def cmd_predict(args) -> int:
    out = _check_out(args.out)
    ds = data.load_dataset(args.data)
    _, test = _split_tagged(ds)
    model = models.load(args.model)
    _check_compatible(model, test)
    pred = model.predict(test.windows())
    with out.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["target", "prediction"])
        for t, p in zip(test.forces, pred):
            w.writerow([f"{float(t):.6g}", f"{float(p):.6g}"])
    print(f"wrote {len(pred)} predictions to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="needleforge", description="OCT needle force estimation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *flags):
        if "seed" in flags:
            p.add_argument("--seed", type=int, default=0)
        if "out" in flags:
            p.add_argument("--out", required=True, help="output path")
        if "sim" in flags:
            p.add_argument("--profile", default="medium", help="soft, medium, stiff or a profile JSON file")
            p.add_argument("--duration", type=float, default=180.0, help="session length in seconds")
            p.add_argument("--dc", type=int, default=64, help="A-scan crop size")
            p.add_argument("--stride", type=int, default=1, help="keep every n-th synchronized force sample")
        if "train" in flags:
            p.add_argument("--arch", default="convgru_cnn_plus", choices=models.KINDS)
            p.add_argument("--epochs", type=int)
            p.add_argument("--batch", type=int)
            p.add_argument("--lr", type=float)
            p.add_argument("--halve-every", type=int)
            p.add_argument("--verbose", action="store_true")

    p = sub.add_parser("simulate", help="simulate a needle session and write a dataset file")
    common(p, "seed", "out", "sim")
    p.add_argument("--ts", type=int, default=50, help="window length in A-scans")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train one architecture on a dataset file")
    common(p, "seed", "out", "train")
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="metrics of one model on the test split")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="side-by-side comparison of several models")
    common(p, "out")
    p.add_argument("--data", required=True)
    p.add_argument("--reps", type=int, default=100)
    p.add_argument("models", nargs="+")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("sweep", help="validation MAE and training time over window lengths")
    common(p, "seed", "out", "sim", "train")
    p.add_argument("--ts-values", default="1,8,32")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bench", help="single-window inference time")
    common(p, "seed")
    p.add_argument("--model", required=True)
    p.add_argument("--reps", type=int, default=100)
    p.add_argument("--data")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("serve", help="stream force estimates over TCP")
    p.add_argument("--model", required=True)
    p.add_argument("--addr", default="127.0.0.1:7070")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("predict", help="write test-split predictions as CSV")
    common(p, "out")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (data.DataFormatError, ModelFormatError) as exc:
        print(f"needleforge: format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except FileNotFoundError as exc:
        print(f"needleforge: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ContractError, DimensionError, CapabilityError, RuntimeError, OSError, ValueError) as exc:
        print(f"needleforge: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
