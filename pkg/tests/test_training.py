import numpy as np
import pytest

from needleforge import data as dt
from needleforge import models as md
from needleforge import numerics as nx
from needleforge import training as tr
from needleforge.numerics import ContractError, Tensor

TINY = dict(d_c=64, t_s=4, cnn_groups=[(8, 1)], gru_hidden=8, convgru_channels=4, stem_channels=4)


def tiny_dataset(n=240, t_s=4, seed=0, zero=False):
    ds = dt.build_dataset("medium", 1.2, t_s, seed=seed, stride=1)
    ds = ds.subset(np.arange(0, n * 2, 2))
    if zero:
        ds.forces[:] = 0.0
    return ds


# --- loss -------------------------------------------------------------------------

def test_mse_examples():
    assert float(tr.mse_loss(Tensor(np.array([1.0, 2.0])), Tensor(np.array([1.0, 2.0]))).data) == 0.0
    assert float(tr.mse_loss(Tensor(np.zeros(2)), Tensor(np.array([1.0, -1.0]))).data) == 1.0
    with pytest.raises(nx.DimensionError):
        tr.mse_loss(Tensor(np.zeros(2)), Tensor(np.zeros(3)))


def test_mse_gradient():
    rng = np.random.default_rng(0)
    for _ in range(10):
        p, t = rng.normal(size=7), rng.normal(size=7)
        assert nx.grad_check_many(lambda ts: tr.mse_loss(ts[0], Tensor(t)), [p]) < 1e-4
        x = Tensor(p, requires_grad=True)
        with nx.Tape() as tape:
            loss = tr.mse_loss(x, Tensor(t))
            tape.backward(loss)
        np.testing.assert_allclose(x.grad, 2 * (p - t) / 7, rtol=1e-12)


# --- Adam ---------------------------------------------------------------------------

def test_adam_first_step_is_lr():
    p = np.array([1.0, -2.0])
    st = tr.AdamState.zeros([p])
    tr.adam_step([p], [np.array([1.0, -3.0])], st, 0.01)
    np.testing.assert_allclose(p, [1.0 - 0.01, -2.0 + 0.01], rtol=1e-6)


def test_adam_zero_gradient_leaves_params():
    p = np.array([0.3, 0.4])
    st = tr.AdamState.zeros([p])
    for _ in range(50):
        tr.adam_step([p], [np.zeros(2)], st, 0.1)
    np.testing.assert_array_equal(p, [0.3, 0.4])


def test_adam_matches_scalar_recurrence():
    grads = [0.5, -1.2, 2.0, 0.1, -0.7]
    b1, b2, eps, lr = 0.9, 0.999, 1e-8, 0.05
    x, m, v = 1.5, 0.0, 0.0
    expect = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        expect.append(x)
    p = np.array([1.5])
    st = tr.AdamState.zeros([p])
    for g, e in zip(grads, expect):
        tr.adam_step([p], [np.array([g])], st, lr, b1, b2, eps)
        assert abs(p[0] - e) < 1e-12


def test_adam_shape_errors():
    p = np.zeros(3)
    with pytest.raises(nx.DimensionError):
        tr.adam_step([p], [np.zeros(2)], tr.AdamState.zeros([p]), 0.1)


# --- schedule and config -----------------------------------------------------------------

def test_lr_schedule_examples():
    cfg = tr.TrainConfig()
    assert tr.lr_schedule(0, cfg) == 1e-4
    assert tr.lr_schedule(30, cfg) == 5e-5 and tr.lr_schedule(60, cfg) == 2.5e-5
    assert tr.lr_schedule(299, cfg) == 1e-4 * 0.5 ** 9
    lrs = [tr.lr_schedule(e, cfg) for e in range(300)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ContractError):
        tr.lr_schedule(-1, cfg)


def test_config_validation():
    for bad in (dict(batch_size=1), dict(lr0=0.0), dict(halve_every=0)):
        with pytest.raises(ContractError):
            tr.TrainConfig(**bad).validate()
    d = tr.desk_config(seed=4)
    assert (d.batch_size, d.max_epochs, d.lr0, d.halve_every, d.seed) == (32, 30, 3e-3, 10, 4)


def test_clip_global_norm_returns_new_arrays():
    g = [np.array([3.0, 0.0]), np.array([4.0])]
    out = tr.clip_global_norm(g, 1.0)
    assert np.isclose(np.sqrt(sum(np.sum(a ** 2) for a in out)), 1.0)
    np.testing.assert_array_equal(g[0], [3.0, 0.0])
    assert tr.clip_global_norm(g, 10.0) is g


# --- training loop -----------------------------------------------------------------------

def test_zero_force_training_converges():
    ds = tiny_dataset(zero=True)
    m = md.build(md.ArchSpec("gru", **TINY))
    m, hist = tr.train(m, ds, tr.TrainConfig(batch_size=20, lr0=1e-2, max_epochs=5))
    assert len(hist) == 5 and hist.val_mae[-1] < 0.01 * dt.PROFILES["medium"].f_max
    assert not m.net.training


@pytest.mark.parametrize("kind", sorted(md.STREAMING_KINDS))
def test_single_step_windows_train(kind):
    ds = tiny_dataset(n=60, t_s=1)
    m = md.build(md.ArchSpec(kind, **{**TINY, "t_s": 1}))
    _, hist = tr.train(m, ds, tr.TrainConfig(batch_size=20, lr0=1e-3, max_epochs=1))
    assert np.isfinite(hist.loss[0])


def test_training_is_bit_reproducible():
    ds = tiny_dataset()
    cfg = tr.TrainConfig(batch_size=20, lr0=3e-3, max_epochs=2, seed=5)
    runs = []
    for _ in range(2):
        m, hist = tr.train(md.build(md.ArchSpec("convgru_cnn_plus", **TINY)), ds, cfg)
        runs.append((md.dumps(m), hist.loss, hist.val_mae))
    assert runs[0] == runs[1]


def test_optimizer_step_count_and_history_csv():
    ds = tiny_dataset(n=130)
    m = md.build(md.ArchSpec("cnn1d", **TINY))
    calls = []
    orig = tr.adam_step

    def counting(*a, **k):
        calls.append(1)
        return orig(*a, **k)

    tr.adam_step = counting
    try:
        m, hist = tr.train(m, ds, tr.TrainConfig(batch_size=25, max_epochs=3))
    finally:
        tr.adam_step = orig
    n_train = 130 - round(0.125 * 130)
    assert len(calls) == 3 * (n_train // 25)
    lines = hist.to_csv().splitlines()
    assert lines[0] == "epoch,loss,val_mae,lr,seconds" and len(lines) == 4
    assert hist.metadata["shuffle"] is True


def test_first_step_reduces_first_batch_loss():
    ds = tiny_dataset(n=120)
    improved = 0
    for seed in range(20):
        m = md.build(md.ArchSpec("gru", **{**TINY, "seed": seed}))
        tr.fit_normalization(m, ds.windows(), ds.forces)
        x = Tensor(m.normalize_input(ds.windows(np.arange(20))))
        y = Tensor((ds.forces[:20] / m.norm.force_scale).astype(np.float32))
        params = m.parameters()
        m.train()
        with nx.Tape() as tape:
            before = tr.mse_loss(m.network_output(x, np.random.default_rng(0)), y)
            tape.backward(before)
        st = tr.AdamState.zeros(params)
        tr.adam_step(params, [p.grad for p in params], st, 1e-3)
        after = tr.mse_loss(m.network_output(x, np.random.default_rng(0)), y)
        improved += float(after.data) < float(before.data)
    assert improved >= 19


def test_training_errors():
    ds = tiny_dataset(n=60)
    with pytest.raises(ContractError):
        tr.train(md.build(md.ArchSpec("gru", **{**TINY, "t_s": 5})), ds, tr.TrainConfig(batch_size=10))
    with pytest.raises(ContractError):
        tr.train(md.build(md.ArchSpec("gru", **TINY)), ds, tr.TrainConfig(batch_size=100))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported():
    ds = tiny_dataset(n=60)
    with pytest.raises(tr.TrainingDivergedError, match="epoch 0, batch 1, lr 1e"):
        tr.train(md.build(md.ArchSpec("gru", **TINY)), ds, tr.TrainConfig(batch_size=10, lr0=1e38, clip_norm=0))


def test_non_finite_labels_rejected():
    ds = tiny_dataset(n=60)
    ds.forces[3] = np.inf
    with pytest.raises(ContractError, match="non-finite"):
        tr.train(md.build(md.ArchSpec("gru", **TINY)), ds, tr.TrainConfig(batch_size=10))
