import json

import numpy as np
import pytest

from twophase.allocation import exact_integer_allocation
from twophase.data import CohortTable, ModelSpec, PriorSpec, stratify, summarize
from twophase.errors import AllocationError, DesignError
from twophase.multiwave import (
    DESIGN_KINDS,
    DesignConfig,
    Priors,
    draw_stratified_sample,
    full_data_sd,
    measure,
    prior_wave1_design,
    run_design,
    wave1_analysis,
)
from twophase.simgen import IMPUTATION, OUTCOME, ScenarioConfig, generate_cohort

from .conftest import full_table


def priors_at(cfg, variance, shift=0.0):
    return Priors(PriorSpec.shifted(cfg.true_beta, shift, variance),
                  PriorSpec.shifted(cfg.true_alpha, shift, variance))


def optimal_allocation(table, x, n):
    return exact_integer_allocation(summarize(table.stratum, full_data_sd(table, OUTCOME, x)), n).n_h


def tv(a, b):
    return 0.5 * np.abs(np.asarray(a) - np.asarray(b)).sum()


def test_priors_at_truth_approximate_full_data_optimum(cohort):
    cfg, table, x = cohort
    alloc = prior_wave1_design(table, OUTCOME, IMPUTATION, priors_at(cfg, 1e-8), 300)
    assert alloc.n == 300
    assert tv(alloc.n_h, optimal_allocation(table, x, 300)) <= 0.05 * 300


def test_homogeneous_limit_is_proportional(rng):
    y = (rng.random(600) < 0.3).astype(float)
    labels, summaries = stratify({"Y": y}, ["Y"])
    table = CohortTable.phase1({"Y": y}, "Y", "X", labels)
    outcome = ModelSpec.from_strings("Y", ["X"], target="X")
    priors = Priors(PriorSpec([0.0, 0.0], [1e-6, 1e-6]), PriorSpec([-1.0], [1e-6]))
    alloc = prior_wave1_design(table, outcome, ModelSpec("X"), priors, 60)
    N = np.array([s.N_h for s in summaries])
    np.testing.assert_array_equal(alloc.n_h, exact_integer_allocation(
        summarize(labels, np.ones(2)), 60).n_h)
    assert np.abs(alloc.n_h - 60 * N / N.sum()).max() <= 1


def test_far_prior_still_valid(cohort):
    cfg, table, _ = cohort
    alloc = prior_wave1_design(table, OUTCOME, IMPUTATION, cfg.prior(3), 50)
    assert alloc.n == 50 and alloc.n_h.min() >= 2


def test_flat_priors_are_rejected(cohort):
    _, table, _ = cohort
    flat = Priors(PriorSpec.flat(4), PriorSpec.flat(4))
    with pytest.raises(DesignError, match="finite prior variances"):
        prior_wave1_design(table, OUTCOME, IMPUTATION, flat, 50)
    wave1 = full_table(table, np.zeros(table.n_rows))
    with pytest.raises(DesignError):
        wave1_analysis(wave1, OUTCOME, IMPUTATION, flat)


def test_sampling_census_and_minimal(cohort):
    _, table, x = cohort
    rng = np.random.default_rng(0)
    N_h = table.stratum_sizes()
    rows = draw_stratified_sample(table, N_h, rng)
    assert np.array_equal(rows, np.arange(table.n_rows))
    assert np.all(measure(table, rows, x).weight == 1.0)
    rows = draw_stratified_sample(table, np.full(table.n_strata, 2), rng)
    w = measure(table, rows, x).weight[rows]
    np.testing.assert_allclose(1 / w, 2 / N_h[table.stratum[rows]])


def test_sampling_is_reproducible_from_seed(cohort):
    _, table, _ = cohort
    counts = np.full(table.n_strata, 5)
    a = draw_stratified_sample(table, counts, np.random.default_rng(3))
    b = draw_stratified_sample(table, counts, np.random.default_rng(3))
    c = draw_stratified_sample(table, counts, np.random.default_rng(4))
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_oversized_allocation_is_error(cohort):
    _, table, _ = cohort
    counts = table.stratum_sizes().copy()
    counts[0] += 1
    with pytest.raises(DesignError, match="exceeds"):
        draw_stratified_sample(table, counts, np.random.default_rng(0))


def test_wave1_census_recovers_full_data_sd(cohort):
    cfg, table, x = cohort
    sd = wave1_analysis(full_table(table, x), OUTCOME, IMPUTATION, priors_at(cfg, 1.0))[0]
    np.testing.assert_allclose(sd, full_data_sd(table, OUTCOME, x), rtol=0.01)
    sd_mle = wave1_analysis(full_table(table, x), OUTCOME, IMPUTATION)[0]
    np.testing.assert_allclose(sd_mle, full_data_sd(table, OUTCOME, x), rtol=1e-12)


@pytest.mark.parametrize("config", [
    DesignConfig("single-proportional"),
    DesignConfig("single-balanced"),
    DesignConfig("optimal-full-data"),
    DesignConfig("twowave-proportional", 1 / 6),
    DesignConfig("twowave-balanced", 0.5),
    DesignConfig("twowave-prior", 0.5, ScenarioConfig().prior(1)),
], ids=lambda c: c.name + (f"-{c.fraction:.2f}" if c.fraction else ""))
def test_run_design_invariants(cohort, config):
    _, table, x = cohort
    run = run_design(table, config, 300, 17, x, OUTCOME, IMPUTATION)
    rows = run.sampled_rows
    assert len(rows) == 300 == len(np.unique(rows))
    assert run.n_h.sum() == 300 and run.n_h.min() >= 2
    w = run.table.weight[rows]
    per_stratum = np.bincount(table.stratum[rows], weights=w, minlength=table.n_strata)
    np.testing.assert_allclose(per_stratum, table.stratum_sizes(), rtol=0, atol=1e-9)
    for wave in run.waves:
        np.testing.assert_array_equal(wave.realized, wave.allocation.n_h)
        json.dumps(wave.record())
    replay = run_design(table, config, 300, 17, x, OUTCOME, IMPUTATION)
    assert np.array_equal(replay.sampled_rows, rows)
    assert replay.final_estimate.beta_hat.tobytes() == run.final_estimate.beta_hat.tobytes()


def test_two_waves_are_disjoint(cohort):
    _, table, x = cohort
    run = run_design(table, DesignConfig("twowave-balanced", 2 / 6), 300, 5, x, OUTCOME, IMPUTATION)
    assert [w.wave_index for w in run.waves] == [1, 2]
    assert run.waves[0].allocation.n == 100
    assert run.waves[1].realized.sum() == 200


def test_optimal_design_is_exact_allocation_of_true_sd(cohort):
    _, table, x = cohort
    run = run_design(table, DesignConfig("optimal-full-data"), 300, 1, x, OUTCOME, IMPUTATION)
    np.testing.assert_array_equal(run.n_h, optimal_allocation(table, x, 300))


def test_balanced_run_on_large_cohort():
    table, x = generate_cohort(ScenarioConfig(N=5000, seed=7), 0)
    run = run_design(table, DesignConfig("single-balanced"), 400, 1, x, OUTCOME, IMPUTATION)
    assert run.n_h.tolist() == [50] * 8


def test_combined_design_approaches_optimum_as_prior_tightens(cohort):
    cfg, table, x = cohort
    opt = optimal_allocation(table, x, 300)
    dist = {}
    for v in (1.0, 1e-6):
        run = run_design(table, DesignConfig("twowave-prior", 0.5, priors_at(cfg, v)), 300, 3, x,
                         OUTCOME, IMPUTATION)
        dist[v] = tv(run.n_h, opt)
    assert dist[1e-6] < dist[1.0]
    assert dist[1e-6] <= 0.05 * 300


def test_invalid_configurations(cohort):
    _, table, x = cohort
    with pytest.raises(DesignError, match="valid kinds: " + ", ".join(DESIGN_KINDS)):
        DesignConfig("stratified-magic")
    with pytest.raises(DesignError):
        DesignConfig("twowave-balanced")
    with pytest.raises(DesignError):
        DesignConfig("single-balanced", 0.5)
    with pytest.raises(DesignError):
        DesignConfig("twowave-prior", 0.5)
    with pytest.raises(DesignError, match="floor infeasible"):
        run_design(table, DesignConfig("single-balanced"), 15, 0, x, OUTCOME, IMPUTATION)
    sampled = full_table(table, x)
    with pytest.raises(DesignError, match="phase-1"):
        run_design(sampled, DesignConfig("single-balanced"), 300, 0, x, OUTCOME, IMPUTATION)


def test_wave1_fraction_with_too_few_units_fails_floor(cohort):
    _, table, x = cohort
    with pytest.raises(AllocationError, match="floor infeasible"):
        run_design(table, DesignConfig("twowave-balanced", 0.01), 300, 0, x, OUTCOME, IMPUTATION)
