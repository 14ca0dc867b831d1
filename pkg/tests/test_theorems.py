import json

import numpy as np
import pytest

from paircfr._rng import make_rng
from paircfr.theorems import THEOREMS, SuiteConfig, gradcheck, random_instance, run_suite

FAST = SuiteConfig(closed_form_pairs=20_000, mc_pairs=20_000, fd_instances=10, cl_instances=20, ce_pairs=200)


def test_fast_suite_passes():
    report = run_suite(FAST)
    assert report.passed, report.table()
    assert [r.name for r in report.results] == list(THEOREMS)
    assert all(r.seconds >= 0 for r in report.results)
    assert json.loads(report.to_json())["passed"] is True
    assert "PASS" in report.table() and "FAIL" not in report.table()


def test_impossible_tolerance_fails_cleanly():
    report = run_suite(SuiteConfig(mc_pairs=2_000, mc_z=1e-12), only=["expected_pair_A_zero_mean"])
    assert not report.passed and report.failures == ["expected_pair_A_zero_mean"]


def test_crashing_check_is_recorded(monkeypatch):
    def boom(cfg):
        raise RuntimeError("kaput")

    monkeypatch.setitem(THEOREMS, "ce_pair_norm", boom)
    res = run_suite(FAST, only=["ce_pair_norm"]).results[0]
    assert not res.passed and "kaput" in res.error


def test_unknown_theorem():
    with pytest.raises(KeyError):
        run_suite(FAST, only=["nope"])


@pytest.mark.parametrize("kw", [{"tau": 0.0}, {"mc_pairs": 1}, {"fd_tol": 0.0}, {"fd_instances": 0}])
def test_suite_config_validation(kw):
    with pytest.raises(ValueError):
        SuiteConfig(**kw)


def test_random_instance_has_positive_pair_and_two_labels():
    rng = make_rng(0)
    for _ in range(200):
        model, X, labels = random_instance(rng)
        assert X.shape == (len(labels), model.W.shape[0])
        assert len(set(labels.tolist())) >= 2
        assert np.bincount(labels).max() >= 2


def test_gradcheck_all_cases_within_tolerance():
    errs = gradcheck(SuiteConfig(fd_instances=20))
    assert set(errs) >= {"ce", "cl_cosine_repulsion", "cl_dot_skip", "combined_cosine"}
    assert max(errs.values()) <= 1e-5
