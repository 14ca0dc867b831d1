import math

import numpy as np
import pytest

from paircfr._rng import make_rng
from paircfr.config import experiment_from_tree, load_toml
from paircfr.datasets import BlockLayout, PairedDataset
from paircfr.evaluation import (
    DEFAULT_GRIDS,
    RunReport,
    aggregate,
    compare,
    evaluate,
    expand_grid,
    override,
    run_experiment,
    split_groups,
    sweep,
    weight_diagnostics,
)
from paircfr.feature_model import canonical_spec, generate_paircad
from paircfr.trainer import LinearModel, init_model
from paircfr.text_ingest import fixture_path


def small_cfg(**train):
    tree = {
        "data": {"n_pairs": 60},
        "train": {"max_epochs": 3, **train},
        "model": {"d": 3},
        "n_ood": 100,
        "seeds": [0, 1],
    }
    return experiment_from_tree(tree)


def test_evaluate_zero_model_ties_to_class_zero():
    ds = generate_paircad(canonical_spec(), 20, seed=0)
    zero = init_model(6, 3, 2, init="zeros")
    assert evaluate(zero, ds) == 0.5


def test_evaluate_matches_bruteforce():
    rng = make_rng(4)
    ds = generate_paircad(canonical_spec(3), 30, seed=2)
    model = LinearModel(rng.standard_normal((6, 4)), rng.standard_normal((4, 3)))
    preds = []
    for x in ds.x:
        z = [sum(x[a] * model.W[a, j] for a in range(6)) for j in range(4)]
        scores = [sum(z[j] * model.U[j, c] for j in range(4)) for c in range(3)]
        preds.append(max(range(3), key=lambda c: (scores[c], -c)))
    assert evaluate(model, ds) == np.mean(np.array(preds) == ds.labels)


def test_evaluate_dominant_true_logit():
    layout = BlockLayout(1, 0, 0)
    ds = PairedDataset(layout, np.array([[-1.0], [1.0], [-2.0], [2.0]]), [0, 1, 0, 1], [0, 1, 0, 1], [0, 0, 1, 1])
    model = LinearModel(np.eye(1), np.array([[-1e9, 1e9]]), identity_encoder=True)
    assert evaluate(model, ds) == 1.0
    with pytest.raises(ValueError):
        evaluate(model, ds.subset([]))


def test_weight_diagnostics_identity_example():
    layout = BlockLayout(1, 1, 0)
    model = LinearModel(np.eye(2), np.eye(2), identity_encoder=True)
    diag = weight_diagnostics(model, layout)
    assert model.discriminant().tolist() == [-1.0, 1.0]
    assert (diag["mass_r1"], diag["mass_r2"], diag["mass_s"]) == (1.0, 1.0, 0.0)
    zero = weight_diagnostics(init_model(2, 3, 2, init="zeros"), layout)
    assert (zero["mass_r1"], zero["mass_r2"], zero["mass_s"], zero["r1_fraction"]) == (0.0, 0.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        weight_diagnostics(model, BlockLayout(1, 1, 1))


def test_split_groups_never_straddle():
    ds = generate_paircad(canonical_spec(), 101, 2, "resample", seed=3)
    parts = split_groups(ds, (0.7, 0.1, 0.2), seed=3)
    ids = [set(p.pair_ids.tolist()) for p in parts]
    assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])
    assert sum(len(p) for p in parts) == len(ds)
    assert len(ids[0]) == pytest.approx(70.7, abs=2)


def test_aggregate_recomputation():
    rows = [{"seed": s, "acc": a} for s, a in enumerate([0.5, 0.75, 0.9])] + [{"seed": 9, "error": "x"}]
    agg = aggregate(rows)["acc"]
    vals = [0.5, 0.75, 0.9]
    mean = sum(vals) / 3
    assert agg["mean"] == pytest.approx(mean, abs=1e-12)
    assert agg["std"] == pytest.approx(math.sqrt(sum((v - mean) ** 2 for v in vals) / 2), abs=1e-12)
    assert agg["n"] == 3


def test_zero_encoder_with_cosine_fails_per_seed():
    cfg = experiment_from_tree({"data": {"n_pairs": 50}, "train": {"max_epochs": 1}, "model": {"init": "zeros"}, "n_ood": 50})
    assert "zero-norm" in run_experiment(cfg).rows[0]["error"]


def test_run_experiment_zero_lr_baseline():
    cfg = experiment_from_tree(
        {"data": {"n_pairs": 50}, "train": {"lr": 0.0, "max_epochs": 2, "loss": {"lam": 0.0}}, "model": {"init": "zeros"}, "n_ood": 100}
    )
    row = run_experiment(cfg).rows[0]
    assert row["id_accuracy"] == 0.5
    assert all(row[f"ood/{s}"] == 0.5 for s in cfg.ood)


def test_run_experiment_deterministic_and_recomputable():
    cfg = small_cfg()
    a, b = run_experiment(cfg), run_experiment(cfg)
    assert a.to_dict() == b.to_dict()
    for key, agg in a.aggregates.items():
        vals = a.metric(key)
        assert agg["mean"] == pytest.approx(np.mean(vals), abs=1e-12)
        assert agg["std"] == pytest.approx(np.std(vals, ddof=1), abs=1e-12)
    assert RunReport.from_dict(a.to_dict()).to_dict() == a.to_dict()


def test_failed_seed_recorded():
    cfg = small_cfg(lr=1e300, warmup_ratio=0.0)
    rep = run_experiment(override(cfg, "lam", 0.0))
    assert len(rep.rows) == 2 and all("TrainingError" in r["error"] for r in rep.rows)
    assert rep.aggregates == {}


def test_text_source_runs():
    tree = load_toml(fixture_path("text_fixture.toml"))
    tree["train"]["max_epochs"] = 3
    rep = run_experiment(experiment_from_tree(tree))
    assert "error" not in rep.rows[0]
    assert 0.0 <= rep.rows[0]["id_accuracy"] <= 1.0


def test_sweep_counts_and_serial_parallel_identity():
    cfg = override(small_cfg(), "seeds", (0,))
    rep = sweep(cfg, {"lam": [0.0, 1.0]})
    assert len(rep.cells) == 2
    par = sweep(cfg, {"lam": [0.0, 1.0]}, threads=2)
    assert par.to_csv() == rep.to_csv()
    assert par.plot_data() == rep.plot_data()


def test_sweep_failed_cell_recorded_and_pvalues():
    cfg = small_cfg()
    rep = sweep(cfg, {"lam": [0.0, 0.5], "batch_size": [8, 1]})
    failed = [p for p, r in rep.cells if any("error" in row for row in r.rows)]
    assert failed == [{"lam": 0.0, "batch_size": 1}, {"lam": 0.5, "batch_size": 1}]
    pv = rep.pairwise_pvalues("id_accuracy")
    assert len(pv) == 6
    ok = next(r for r in pv if (r["cell_a"], r["cell_b"]) == (0, 2))
    assert ok["n"] == 2 and ("p" in ok or "error" in ok)
    assert "error" in next(r for r in pv if r["cell_b"] == 1)
    csv_lines = rep.to_csv().splitlines()
    assert len(csv_lines) == 1 + 4 * 2 + 4 * 2


def test_compare_tie():
    rep = RunReport("a", [{"seed": 0, "m": 0.5}, {"seed": 1, "m": 0.7}])
    res = compare(rep, rep, "m")
    assert res["exact_tie"] and res["p"] == 1.0


def test_default_grids():
    g = DEFAULT_GRIDS["lam_tau"]
    assert 0.7 in g["lam"] and 0.3 in g["tau"]
    assert {"lam": 0.7, "tau": 0.3} in expand_grid(g)
    assert min(g["tau"]) > 0
    assert DEFAULT_GRIDS["few_shot"]["n_pairs"] == [16, 32, 64, 256, 512]
    assert DEFAULT_GRIDS["batch_size"]["batch_size"] == [4, 8, 16, 64, 256]
    with pytest.raises(ValueError):
        expand_grid({})


def test_override_aliases_and_unknown():
    cfg = small_cfg()
    assert override(cfg, "lambda", 0.3).train.loss.lam == 0.3
    assert override(cfg, "k", 2).data.cfes_per_original == 2
    with pytest.raises(AttributeError):
        override(cfg, "train.nope", 1)


def test_ce_on_cad_r1_mass_dominates():
    cfg = experiment_from_tree(
        {
            "data": {"n_pairs": 10_000},
            "train": {"lr": 0.05, "batch_size": 16, "loss": {"lam": 0.0}},
            "model": {"d": 4, "sigma_init": 0.1},
            "n_ood": 500,
        }
    )
    row = run_experiment(cfg).rows[0]
    assert row["mass_r1"] >= 5 * row["mass_r2"]


def test_ce_on_cad_uses_r2_less_than_paircfr():
    cfg = override(experiment_from_tree(load_toml(fixture_path("canonical.toml"))), "n_ood", 200)
    ratio = {}
    for lam in (0.0, 0.7):
        rep = run_experiment(override(cfg, "lam", lam))
        ratio[lam] = np.mean([r["mass_r2"] / r["mass_r1"] for r in rep.ok_rows])
    assert ratio[0.0] < ratio[0.7]
