import numpy as np
import pytest
from scipy import stats
from scipy.special import expit, logit

from twophase.data import build_design_matrix
from twophase.errors import DesignError
from twophase.glm import fit_weighted_logistic
from twophase.multiwave import DesignConfig
from twophase.simgen import (
    OUTCOME,
    ScenarioConfig,
    generate_cohort,
    run_replicate,
    simulate,
    summarize_estimates,
)

from .conftest import full_table


def test_perfect_surrogate_copies_x():
    table, x = generate_cohort(ScenarioConfig(sensitivity=1.0, specificity=1.0, seed=1), 0)
    np.testing.assert_array_equal(table.columns["A"], x)


def test_null_effect_has_unit_odds_ratio():
    cfg = ScenarioConfig(beta1=0.0, N=20000, seed=2)
    table, x = generate_cohort(cfg, 0)
    X, y = build_design_matrix(full_table(table, x), OUTCOME)
    fit = fit_weighted_logistic(X, y)
    se = np.sqrt(fit.covariance[1, 1])
    assert abs(fit.beta_hat[1]) < 3 * se


def test_surrogate_prevalence():
    # P(A=1) = 0.15 * 0.8 + 0.85 * 0.2 = 0.29
    table, _ = generate_cohort(ScenarioConfig(N=1_000_000, seed=4), 0)
    p = table.columns["A"].mean()
    assert abs(p - 0.29) < 3 * np.sqrt(0.29 * 0.71 / 1_000_000)


def test_cohort_shape_and_strata():
    table, x = generate_cohort(ScenarioConfig(seed=5), 0)
    assert table.n_rows == 1000 and table.n_strata == 8
    assert set(np.unique(x)) == {0.0, 1.0}
    assert not table.phase2.any()


def test_true_imputation_coefficients():
    cfg = ScenarioConfig(sensitivity=0.9, specificity=0.8)
    p1 = expit(cfg.true_alpha[0] + cfg.true_alpha[1])
    assert p1 == pytest.approx(0.15 * 0.9 / (0.15 * 0.9 + 0.85 * 0.2))
    assert logit(expit(cfg.true_alpha[0])) == pytest.approx(np.log(0.15 * 0.1 / (0.85 * 0.8)))
    assert np.all(cfg.true_alpha[2:] == 0)


def test_replicates_are_deterministic():
    cfg = ScenarioConfig(seed=6)
    a, xa = generate_cohort(cfg, 3)
    b, xb = generate_cohort(cfg, 3)
    c, _ = generate_cohort(cfg, 4)
    assert np.array_equal(xa, xb)
    assert all(np.array_equal(a.columns[k], b.columns[k]) for k in a.columns)
    assert not np.array_equal(a.columns["Z1"], c.columns["Z1"])
    designs = [DesignConfig("single-balanced"), DesignConfig("twowave-balanced", 0.5)]
    assert run_replicate(cfg, 3, designs) == run_replicate(cfg, 3, designs)


def test_design_list_has_every_table_column():
    names = [d.name for d in ScenarioConfig().design_configs()]
    assert len(names) == 3 + 5 + 5 + 4 * 5
    assert names.count("prior3") == 5


def test_optimal_against_itself_is_within_noise():
    cfg = ScenarioConfig(reps=60, designs=("optimal-full-data",), seed=8)
    designs = [DesignConfig("optimal-full-data"), DesignConfig("optimal-full-data", label="copy")]
    est = np.array([run_replicate(cfg, r, designs) for r in range(cfg.reps)], dtype=float)
    rows = summarize_estimates(cfg, est, designs)
    assert rows[0].ere == 1.0
    # variance ratio of two independent-sampling copies on shared cohorts is
    # at worst F-distributed; the paired design only narrows it
    lo, hi = stats.f.ppf([0.0005, 0.9995], cfg.reps - 1, cfg.reps - 1)
    assert lo < rows[1].ere < hi


def test_single_replicate_reports_missing_mc_se():
    cfg = ScenarioConfig(reps=1, designs=("optimal-full-data", "single-balanced"), seed=9)
    rows = summarize_estimates(cfg, simulate(cfg))
    assert rows[0].record()["mc_se"] == "NA"
    assert rows[0].reps_used == 1


def test_too_many_failures_abort():
    cfg = ScenarioConfig(reps=100, designs=("optimal-full-data",))
    est = np.full((100, 1), 1.0)
    est[:3] = np.nan
    with pytest.raises(DesignError, match="> 2%"):
        summarize_estimates(cfg, est)
    est[2] = 1.0
    assert summarize_estimates(cfg, est)[0].excluded == 2


def test_metric_rows_format():
    cfg = ScenarioConfig(reps=3, designs=("optimal-full-data", "twowave-balanced"),
                         fractions=(0.5,), seed=10)
    rows = summarize_estimates(cfg, simulate(cfg))
    rec = rows[1].record()
    assert rec["fraction"] == "3/6"
    assert len(rec["mse_x10"].split(".")[1]) == 2 and len(rec["ere"].split(".")[1]) == 2
    assert all(r.mse_times_10 >= 0 for r in rows)


def test_parallel_matches_serial():
    kw = dict(reps=4, designs=("optimal-full-data", "single-balanced"), seed=12)
    serial = simulate(ScenarioConfig(**kw))
    parallel = simulate(ScenarioConfig(workers=2, **kw))
    assert serial.tobytes() == parallel.tobytes()
