"""Request handlers: the single code path behind both the HTTP routes and the in-process CLI."""

from __future__ import annotations

import numpy as np

from ..allocation import exact_integer_allocation
from ..data import ModelSpec, PriorSpec, StratumSummary, cohort_from_columns, stratify
from ..errors import ConfigError, NumericalError, TwoPhaseError
from ..multiwave import DESIGN_KINDS, DesignConfig, Priors, run_design
from ..simgen import ScenarioConfig, run_scenario
from .schemas import (
    AllocationRequest,
    AllocationResponse,
    CoefficientRow,
    DesignRequest,
    DesignResponse,
    ErrorResponse,
    MetricRecord,
    SimulateRequest,
    SimulateResponse,
    StratumRow,
    WeightRow,
)


def exit_code(exc: TwoPhaseError) -> int:
    """2 for bad input or an infeasible design, 3 for a numerical failure."""
    return 3 if isinstance(exc, NumericalError) else 2


def error_response(exc: TwoPhaseError) -> ErrorResponse:
    return ErrorResponse(module=exc.module, error=type(exc).__name__, message=str(exc),
                         exit_code=exit_code(exc))


def allocate(req: AllocationRequest) -> AllocationResponse:
    summaries = [StratumSummary(h, N, sd_h=sd) for h, (N, sd) in enumerate(zip(req.N_h, req.sd_h))]
    alloc = exact_integer_allocation(summaries, req.n, req.floor, req.ceilings)
    return AllocationResponse(n_h=alloc.as_list(), objective=alloc.objective)


def _model(terms, target: str | None) -> ModelSpec:
    try:
        return ModelSpec.from_strings(terms.response, terms.terms, target=target, intercept=terms.intercept)
    except ValueError as exc:
        raise ConfigError(f"bad model term: {exc}") from exc


def design(req: DesignRequest) -> DesignResponse:
    outcome = _model(req.outcome_model, req.expensive)
    imputation = _model(req.imputation_model, None)
    if req.expensive not in outcome.coef_names:
        raise ConfigError(f"outcome model must contain the expensive variable {req.expensive!r} as a main effect")
    if imputation.response != req.expensive:
        raise ConfigError(f"imputation model response must be {req.expensive!r}")
    if req.design not in DESIGN_KINDS:
        raise ConfigError(f"unknown design {req.design!r}; valid kinds: {', '.join(DESIGN_KINDS)}")
    referenced = (outcome.referenced_columns | imputation.referenced_columns) - {req.expensive}
    table, x = cohort_from_columns(req.columns, req.outcome, req.expensive, req.strata,
                                   sorted(referenced - set(req.strata)), sorted(referenced & set(req.strata)))
    priors = None
    if req.priors is not None:
        priors = Priors(PriorSpec(req.priors.outcome.mean, req.priors.outcome.variance),
                        PriorSpec(req.priors.imputation.mean, req.priors.imputation.variance))
    config = DesignConfig(req.design, req.fraction, priors, req.floor)
    run = run_design(table, config, req.n, req.seed, x, outcome, imputation)

    _, summaries = stratify(table.columns, req.strata)
    waves = [w.realized for w in run.waves] + [np.zeros(table.n_strata, np.int64)]
    allocation = [StratumRow(stratum=s.stratum_id, cell=dict(zip(req.strata, s.cell)), N_h=s.N_h,
                             n_wave1=int(waves[0][h]), n_wave2=int(waves[1][h]),
                             n_h=int(waves[0][h] + waves[1][h]))
                  for h, s in enumerate(summaries)]
    est = run.final_estimate
    estimate = [CoefficientRow(term=t, estimate=float(b), std_error=float(se))
                for t, b, se in zip(est.coef_names, est.beta_hat, est.std_errors)]
    rows = run.sampled_rows
    weights = [WeightRow(row=int(r), stratum=int(table.stratum[r]), design_weight=float(w), g=float(g),
                         calibrated_weight=float(cw))
               for r, w, g, cw in zip(rows, run.table.weight[rows], est.g, est.weights)]
    return DesignResponse(design=config.name, allocation=allocation, waves=[w.record() for w in run.waves],
                          estimate=estimate, weights=weights)


def simulate(req: SimulateRequest) -> SimulateResponse:
    fields = req.model_dump(exclude_none=True)
    for key in ("fractions", "priors", "designs"):
        if key in fields:
            fields[key] = tuple(fields[key])
    unknown = set(fields.get("designs", ())) - set(DESIGN_KINDS)
    if unknown:
        raise ConfigError(f"unknown design {sorted(unknown)[0]!r}; valid kinds: {', '.join(DESIGN_KINDS)}")
    try:
        config = ScenarioConfig(**fields)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    rows = run_scenario(config)
    return SimulateResponse(rows=[MetricRecord(**r.record()) for r in rows])
