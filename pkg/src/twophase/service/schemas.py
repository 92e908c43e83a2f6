"""Request and response models shared by the HTTP service and the command-line client."""

from __future__ import annotations

from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PriorModel(_Strict):
    mean: list[float]
    variance: list[float]

    @model_validator(mode="after")
    def _same_length(self):
        if len(self.mean) != len(self.variance):
            raise ValueError("prior mean and variance must have the same length")
        return self


class PriorPair(_Strict):
    outcome: PriorModel
    imputation: PriorModel


class AllocationRequest(_Strict):
    N_h: list[int] = Field(min_length=1)
    sd_h: list[float]
    n: int
    floor: int = 2
    ceilings: Optional[list[int]] = None

    @model_validator(mode="after")
    def _lengths(self):
        if len(self.sd_h) != len(self.N_h):
            raise ValueError("N_h and sd_h must have the same length")
        if self.ceilings is not None and len(self.ceilings) != len(self.N_h):
            raise ValueError("ceilings must have one entry per stratum")
        return self


class AllocationResponse(BaseModel):
    n_h: list[int]
    objective: float


class ModelTerms(_Strict):
    response: str
    terms: list[str] = []
    intercept: bool = True


class DesignRequest(_Strict):
    columns: dict[str, list[Optional[float]]]
    outcome: str
    expensive: str
    strata: list[str] = Field(min_length=1)
    outcome_model: ModelTerms
    imputation_model: ModelTerms
    design: str
    n: int
    seed: int = 0
    fraction: Optional[float] = None
    priors: Optional[PriorPair] = None
    floor: int = 2


class StratumRow(BaseModel):
    stratum: int
    cell: dict[str, float]
    N_h: int
    n_wave1: int
    n_wave2: int
    n_h: int


class CoefficientRow(BaseModel):
    term: str
    estimate: float
    std_error: float


class WeightRow(BaseModel):
    row: int
    stratum: int
    design_weight: float
    g: float
    calibrated_weight: float


class DesignResponse(BaseModel):
    design: str
    allocation: list[StratumRow]
    waves: list[dict]
    estimate: list[CoefficientRow]
    weights: list[WeightRow]


class SimulateRequest(_Strict):
    beta1: float = 1.0
    sensitivity: float = 0.8
    specificity: float = 0.8
    N: int = 1000
    n: int = 300
    reps: int = 1000
    fractions: list[float] = [1 / 6, 2 / 6, 3 / 6, 4 / 6, 5 / 6]
    priors: list[int] = [1, 2, 3, 4]
    designs: Optional[list[str]] = None
    seed: int = 20210
    workers: int = 1


class MetricRecord(BaseModel):
    design: str
    fraction: str
    mse_x10: str
    ere: str
    reps_used: int
    excluded: int
    mc_se: str


class SimulateResponse(BaseModel):
    rows: list[MetricRecord]


class ErrorResponse(BaseModel):
    module: str
    error: str
    message: str
    exit_code: int
