
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from paircfr._rng import make_rng
from paircfr.datasets import BlockLayout
from paircfr.feature_model import FeatureModelSpec, canonical_spec, generate_paircad
from paircfr.losses import GradReport, LossConfig
from paircfr.trainer import (
    SGD,
    AdamW,
    LinearModel,
    TrainConfig,
    TrainingError,
    ce_objective,
    finite_diff_check,
    forward,
    init_model,
    is_colocated,
    lr_scale,
    make_batches,
    train,
)


def test_init_zeros_and_determinism():
    z = init_model(4, 3, 2, init="zeros")
    assert not np.any(z.W) and not np.any(z.U)
    a, b = init_model(5, 3, 2, seed=11), init_model(5, 3, 2, seed=11)
    assert np.array_equal(a.W, b.W) and np.array_equal(a.U, b.U)
    assert not np.array_equal(a.W, init_model(5, 3, 2, seed=12).W)


def test_init_scale():
    model = init_model(100, 100, 2, init="normal", seed=0, sigma_init=0.01)
    assert abs(model.W.std() / 0.01 - 1.0) <= 0.05


def test_init_rejects_bad_shapes():
    with pytest.raises(ValueError):
        init_model(0, 2, 2)
    with pytest.raises(ValueError):
        init_model(3, 2, 2, identity_encoder=True)


def test_make_batches_paircad_counts():
    ds = generate_paircad(canonical_spec(), 4, seed=0)
    batches = make_batches(ds, "paircad", 4, seed=0)
    assert len(batches) == 2
    assert all(len(b) == 4 and is_colocated(ds, b) for b in batches)


def test_make_batches_k4_groups_of_five():
    ds = generate_paircad(canonical_spec(), 60, 4, "resample", seed=0)
    batches = make_batches(ds, "paircad", 30, seed=1)
    assert len(batches) == 10 and all(len(b) == 30 for b in batches)
    assert all(len({int(ds.pair_ids[i]) for i in b}) == 6 for b in batches)


def test_make_batches_group_too_large():
    ds = generate_paircad(canonical_spec(), 5, 4, "resample", seed=0)
    with pytest.raises(ValueError, match="smaller than a pair group"):
        make_batches(ds, "paircad", 4, seed=0)


def test_make_batches_shuffcad_drops_singleton():
    ds = generate_paircad(canonical_spec(), 5, seed=0)  # 10 samples
    batches = make_batches(ds, "shuffcad", 3, seed=0)
    assert [len(b) for b in batches] == [3, 3, 3]


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 40), k=st.integers(1, 3), bs=st.integers(4, 20), seed=st.integers(0, 2**31))
def test_paircad_colocation_property(n, k, bs, seed):
    ds = generate_paircad(canonical_spec(), n, k, "resample", seed=seed)
    batches = make_batches(ds, "paircad", bs, seed)
    assert all(is_colocated(ds, b) for b in batches)
    assert sorted(np.concatenate(batches).tolist()) == list(range(len(ds)))
    assert all(len(b) <= bs for b in batches)


def test_forward_examples():
    m = 3
    model = init_model(m, m, m, identity_encoder=True)
    model.U[:] = np.eye(m)
    X = make_rng(0).standard_normal((4, m))
    assert np.array_equal(forward(model, X)[1], X)
    rng = make_rng(1)
    model = LinearModel(rng.standard_normal((5, 3)), rng.standard_normal((3, 2)))
    X = rng.standard_normal((7, 5))
    z, logits = forward(model, X)
    oracle = np.array([[sum(X[i, a] * model.W[a, j] for a in range(5)) for j in range(3)] for i in range(7)])
    assert np.allclose(z, oracle, atol=1e-12)
    assert np.allclose(logits, oracle @ model.U, atol=1e-12)
    with pytest.raises(ValueError):
        forward(model, np.zeros((2, 4)))


def test_lr_schedule():
    assert lr_scale(0, 100, 0.05) == pytest.approx(0.2)
    assert lr_scale(4, 100, 0.05) == 1.0
    assert lr_scale(5, 100, 0.05) == pytest.approx(95 / 95)
    assert lr_scale(99, 100, 0.05) == pytest.approx(1 / 95)
    assert lr_scale(50, 100, 0.0, "constant") == 1.0


def test_sgd_step_exact():
    theta = {"W": np.array([1.0, -2.0])}
    g = {"W": np.array([0.5, 0.25])}
    SGD(0.1).step(theta, g)
    assert theta["W"].tolist() == [1.0 - 0.1 * 0.5, -2.0 - 0.1 * 0.25]


def test_sgd_momentum():
    theta = {"W": np.zeros(1)}
    opt = SGD(1.0, momentum=0.5)
    opt.step(theta, {"W": np.ones(1)})
    opt.step(theta, {"W": np.ones(1)})
    assert theta["W"].tolist() == [-(1.0 + 1.5)]


def test_adamw_first_step_is_sign_step():
    theta = {"W": np.array([1.0, 1.0])}
    AdamW(0.01, eps=1e-12, weight_decay=0.1).step(theta, {"W": np.array([3.0, -0.2])})
    assert theta["W"] == pytest.approx([1.0 - 0.001 - 0.01, 1.0 - 0.001 + 0.01], abs=1e-12)


def test_train_config_defaults():
    cfg = TrainConfig()
    assert (cfg.max_epochs, cfg.patience, cfg.warmup_ratio) == (20, 5, 0.05)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=1)
    with pytest.raises(ValueError):
        TrainConfig(warmup_ratio=1.0)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def separable():
    spec = FeatureModelSpec.isotropic((2, 1, 1), [3.0, 2.0], [1.0], [0.5], variances=0.1)
    return generate_paircad(spec, 40, seed=0)


def test_train_loss_decreases_convex_case():
    ds = separable()
    model = init_model(4, 4, 2, init="zeros", identity_encoder=True)
    cfg = TrainConfig(LossConfig(lam=0.0), batch_size=8, lr=0.05, max_epochs=5, patience=5, warmup_ratio=0.0, schedule="constant")
    _, hist = train(model, ds, ds, cfg)
    assert len(hist.train_loss) == 5
    assert all(b < a for a, b in zip(hist.train_loss, hist.train_loss[1:]))


def test_train_early_stop_with_zero_lr():
    ds = separable()
    model = init_model(4, 3, 2, seed=0)
    _, hist = train(model, ds, ds, TrainConfig(lr=0.0, patience=1))
    assert hist.stopping_epoch == 2 and hist.best_epoch == 1


def test_train_replay_and_lambda_zero_endpoint():
    ds = generate_paircad(canonical_spec(), 60, seed=1)
    model = init_model(6, 4, 2, seed=1, sigma_init=0.1)
    cfg = TrainConfig(LossConfig(lam=0.0), lr=0.1, max_epochs=6, seed=3)
    a_model, a = train(model, ds, ds, cfg)
    b_model, b = train(model, ds, ds, cfg)
    c_model, c = train(model, ds, ds, cfg, objective=ce_objective(ds.layout))
    for other_model, other in ((b_model, b), (c_model, c)):
        assert other.train_loss == a.train_loss and other.valid_loss == a.valid_loss
        assert np.array_equal(other_model.W, a_model.W) and np.array_equal(other_model.U, a_model.U)


def test_best_snapshot_has_lowest_valid_loss():
    ds = generate_paircad(canonical_spec(), 60, seed=1)
    _, hist = train(init_model(6, 4, 2, seed=2, sigma_init=0.1), ds, ds, TrainConfig(LossConfig(lam=0.5), max_epochs=8))
    assert hist.valid_loss[hist.best_epoch - 1] == min(hist.valid_loss)
    assert hist.stopping_epoch <= 8


def test_identity_encoder_never_updated():
    ds = separable()
    best, _ = train(init_model(4, 4, 2, identity_encoder=True), ds, ds, TrainConfig(LossConfig(lam=0.5), max_epochs=2))
    assert np.array_equal(best.W, np.eye(4))


def test_nonfinite_aborts_with_diagnostics():
    ds = separable()
    cfg = TrainConfig(LossConfig(lam=0.0), lr=1e300, warmup_ratio=0.0, max_epochs=3)
    with pytest.raises(TrainingError, match="non-finite.*parameter norms"):
        train(init_model(4, 3, 2, seed=0), ds, ds, cfg)


def test_finite_diff_quadratic_harness():
    model = LinearModel(make_rng(0).standard_normal((3, 2)), make_rng(1).standard_normal((2, 2)))

    def quadratic(mdl, X, labels):
        loss = 0.5 * (np.sum(mdl.W**2) + np.sum(mdl.U**2))
        return loss, GradReport(mdl.W.copy(), mdl.U.copy())

    assert finite_diff_check(model, np.zeros((1, 3)), [0], objective=quadratic) <= 1e-10
    with pytest.raises(ValueError):
        finite_diff_check(model, np.zeros((1, 3)), [0], LossConfig(), epsilon=0.0)


def test_finite_diff_large_model_subsamples():
    rng = make_rng(3)
    model = LinearModel(0.1 * rng.standard_normal((300, 20)), rng.standard_normal((20, 2)))
    X, labels = rng.standard_normal((6, 300)), np.array([0, 1, 0, 1, 1, 0])
    assert finite_diff_check(model, X, labels, LossConfig(lam=0.5), max_coords=1000) <= 1e-5


def test_model_tsv_roundtrip(tmp_path):
    model = init_model(4, 3, 2, seed=5, head_bias=True, layout=BlockLayout(2, 1, 1))
    model.b[:] = [0.25, -1e-17]
    model.to_tsv(tmp_path / "m.tsv")
    back = LinearModel.from_tsv(tmp_path / "m.tsv")
    assert np.array_equal(back.W, model.W) and np.array_equal(back.U, model.U) and np.array_equal(back.b, model.b)
    assert back.layout == model.layout
