import numpy as np
import pytest

from ascseg import trainer
from ascseg.gradcheck import check_gradient, relu_pattern
from ascseg.model import NetConfig, init_params
from ascseg.perturb import blend
from ascseg.synthdata import PhantomSpec, gen_source, gen_target
from ascseg.trainer import (
    MODES,
    Flags,
    NumericalError,
    TrainConfig,
    build_batch,
    evaluate,
    steps_per_epoch,
    student_loss,
    teacher_predict,
    train,
)

SMALL = PhantomSpec(dims=(8, 8, 8))


@pytest.fixture(scope="module")
def tiny_data():
    src = gen_source(4, SMALL)
    tgt = [v for v, _, _ in gen_target(3, SMALL, stream=1)]
    test = gen_target(2, SMALL, stream=2)
    return src, tgt, test


def test_flags_ladder():
    rows = [Flags.for_mode(m) for m in MODES]
    assert [(f.seg_sft, f.app_xt, f.app_xtfs, f.structure) for f in rows] == [
        (False, False, False, False),
        (True, False, False, False),
        (True, True, False, False),
        (True, True, True, False),
        (True, True, True, True),
    ]
    assert not rows[1].uses_teacher and rows[2].uses_teacher
    with pytest.raises(ValueError):
        Flags.for_mode("M6")


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch=8)
    with pytest.raises(ValueError):
        TrainConfig(beta=1.0)
    with pytest.raises(ValueError):
        TrainConfig(ablation="M0")


def test_steps_per_epoch():
    assert steps_per_epoch(20, 20) == 10
    assert steps_per_epoch(47, 40) == 24
    assert steps_per_epoch(1, 5) == 3


def test_epoch_indices_cover_larger_set():
    rng = np.random.default_rng(0)
    big = trainer._epoch_indices(6, 6, 3, 2, rng)
    assert sorted(big.ravel().tolist()) == list(range(6))
    small = trainer._epoch_indices(2, 6, 3, 2, rng)
    assert small.shape == (3, 2) and small.max() < 2


def test_build_batch_views(tiny_data):
    src, tgt, _ = tiny_data
    xs = [v for v, _ in src[:2]]
    ys = [y for _, y in src[:2]]
    rng = np.random.default_rng(1)
    mask_rngs = [np.random.default_rng(k) for k in range(2)]
    b = build_batch(xs, ys, tgt[:2], 0.1, 4, rng, mask_rngs)
    assert b.xs.shape == b.xsft.shape == b.xt.shape == b.xtfs.shape == (2, 8, 8, 8)
    assert b.ys.shape == (2, 4, 8, 8, 8)
    assert b.partners == [1, 0]
    assert len(b.masks) == 2
    # beta=0 swaps only the zero-frequency bin, i.e. shifts each view by a constant
    b0 = build_batch(xs, ys, tgt[:2], 0.0, 4, np.random.default_rng(1), mask_rngs)
    for a, b in ((b0.xsft, b0.xs), (b0.xtfs, b0.xt)):
        d = (a - b).reshape(2, -1)
        assert np.allclose(d, d[:, :1], atol=1e-5)


@pytest.mark.parametrize("mode", ["M1", "M3", "M5"])
def test_student_loss_gradient(mode):
    spec = PhantomSpec(dims=(4, 4, 4), classes=2, semi_axes=((0.4, 0.4, 0.4),), source_intensities=(0.0, 1.0),
                       target_intensities=(0.0, 0.8), noise_sigma=0.1)
    src = gen_source(2, spec)
    tgt = [v for v, _, _ in gen_target(2, spec)]
    net = NetConfig(hidden=2, classes=2, seed=7)
    rng = np.random.default_rng(7)
    batch = build_batch([v for v, _ in src], [y for _, y in src], tgt, 0.25, 2, rng,
                        [np.random.default_rng(k) for k in range(2)])
    # random biases too: zero biases put dead-unit pre-activations exactly on a kink
    p = init_params(net).astype(np.float64) + 0.05 * rng.standard_normal(net.n_params)
    teacher = p + 0.05 * rng.standard_normal(p.size)
    flags = Flags.for_mode(mode)
    t_out = teacher_predict(teacher, batch, net) if flags.uses_teacher else None
    total, _, grad = student_loss(p, batch, t_out, flags, 3.0, net)
    blends = [blend(v[j], v[k], m) for v in (batch.xt, batch.xtfs) for j, k, m in zip(range(2), batch.partners, batch.masks)]
    views = np.concatenate([batch.xs, batch.xsft, batch.xt, batch.xtfs, np.stack(blends)])
    res = check_gradient(
        p, lambda q: student_loss(q, batch, t_out, flags, 3.0, net)[0].value, grad,
        pattern_fn=lambda q: relu_pattern(q, [views], net),
    )
    assert res.max_rel < 1e-3


def test_m1_logs_zero_consistency(tiny_data):
    src, tgt, _ = tiny_data
    _, _, log = train(TrainConfig(epochs=2, lr=1e-3, ablation="M1", hidden=2), src, tgt)
    assert len(log.records) == 2 * steps_per_epoch(4, 3)
    assert all(r["l_app"] == 0 and r["l_str"] == 0 for r in log.records)
    assert all(r["l_total"] == r["l_seg"] for r in log.records)


def test_m5_logs_and_masks(tiny_data):
    src, tgt, test = tiny_data
    # beta 0.25 gives a 5^3 mask on the 8^3 grid, so X_tfs differs from X_t
    cfg = TrainConfig(epochs=2, lr=1e-3, ablation="M5", hidden=2, gamma=10, beta=0.25)
    student, teacher, log = train(cfg, src, tgt, eval_set=test)
    assert all(r["l_app"] > 0 and r["l_str"] > 0 for r in log.records)
    assert len(log.masks) == 2 * len(log.records)
    assert len(log.eval_dsc) == 2
    assert not np.array_equal(student, teacher)
    lams = [r["lambda"] for r in log.records]
    assert lams == sorted(lams) and lams[0] == pytest.approx(10 * np.exp(-5 * (1 - 0) ** 2))
    lrs = [r["lr"] for r in log.records]
    assert lrs[0] == 1e-3 and lrs[-1] < 1e-3
    header = log.to_csv().splitlines()[0]
    assert header == "step,epoch,lr,lambda,l_seg,l_app,l_str,l_total"


def test_deterministic_rerun(tiny_data):
    src, tgt, test = tiny_data
    cfg = TrainConfig(epochs=2, lr=1e-3, ablation="M5", hidden=2, seed=3)
    a, _, la = train(cfg, src, tgt)
    b, _, lb = train(cfg, src, tgt)
    assert la.to_csv() == lb.to_csv()
    assert a.tobytes() == b.tobytes()
    net = cfg.net_config()
    assert evaluate(a, test, net).to_csv() == evaluate(b, test, net).to_csv()


def test_checkpoints(tiny_data, tmp_path):
    src, tgt, _ = tiny_data
    train(TrainConfig(epochs=2, lr=1e-3, ablation="M2", hidden=2, ckpt_every=1), src, tgt, ckpt_dir=tmp_path)
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["student_epoch001.ascp", "student_epoch002.ascp", "teacher_epoch001.ascp", "teacher_epoch002.ascp"]


def test_nan_aborts(tiny_data, monkeypatch):
    src, tgt, _ = tiny_data
    real = trainer.student_loss

    def poisoned(*args):
        total, parts, grad = real(*args)
        total.value = float("nan")
        return total, parts, grad

    monkeypatch.setattr(trainer, "student_loss", poisoned)
    with pytest.raises(NumericalError) as err:
        train(TrainConfig(epochs=1, hidden=2), src, tgt)
    assert err.value.record["step"] == 0


def test_rejects_bad_inputs(tiny_data):
    src, tgt, _ = tiny_data
    with pytest.raises(ValueError):
        train(TrainConfig(epochs=1), src, [])
    with pytest.raises(ValueError):
        train(TrainConfig(epochs=1), src, [np.zeros((8, 8, 9), np.float32)])


def test_evaluate_with_perfect_predictor(tiny_data):
    _, _, test = tiny_data
    oracle = {id(v): y for v, y, _ in test}

    def predictor(v):
        y = oracle[id(v)]
        return np.stack([(y == c).astype(float) for c in range(4)])

    rep = evaluate(None, test, NetConfig(), predictor=predictor)
    assert rep.avg == 1.0
