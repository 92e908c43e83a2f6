"""Command-line entry point.

    twophase design   --config run.yaml [--input cohort.csv --n 720 --design ...]
    twophase simulate --config run.yaml [--beta1 0.5 --reps 200 ...]
    twophase serve    [--host 127.0.0.1 --port 8000]

A YAML config supplies the defaults and flags override it. Requests run
in-process unless ``--server URL`` points at a running service, in which case
the CLI only ships the request and writes the response. Exit codes: 0 on
success, 2 for bad input or an infeasible design, 3 for a numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Literal, Optional

import pandas as pd
import yaml
from pydantic import BaseModel, ConfigDict, ValidationError

from .data import read_columns
from .errors import ConfigError, TwoPhaseError
from .service import handlers
from .service.schemas import (
    DesignRequest,
    DesignResponse,
    ErrorResponse,
    ModelTerms,
    PriorPair,
    SimulateRequest,
    SimulateResponse,
)

log = logging.getLogger("twophase")


class DesignSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    input_csv: Optional[Path] = None
    outcome: Optional[str] = None
    expensive: Optional[str] = None
    strata: list[str] = []
    outcome_terms: list[str] = []
    imputation_terms: list[str] = []
    kind: Optional[str] = None
    n: Optional[int] = None
    fraction: Optional[float] = None
    priors: Optional[PriorPair | Path] = None
    floor: int = 2


class SimulateSection(SimulateRequest):
    pass


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    mode: Literal["design", "simulate"]
    seed: Optional[int] = None
    output: Path = Path(".")
    design: DesignSection = DesignSection()
    simulate: SimulateSection = SimulateSection()

    @property
    def effective_seed(self) -> int:
        if self.mode == "simulate":
            return self.simulate.seed
        return 0 if self.seed is None else self.seed

    def fingerprint(self) -> dict:
        """The settings that determine the outputs (not where they go or how fast)."""
        body = {"mode": self.mode, "seed": self.effective_seed}
        if self.mode == "design":
            body["design"] = self.design.model_dump(mode="json")
        else:
            body["simulate"] = self.simulate.model_dump(mode="json", exclude={"workers"})
        return body

    def config_hash(self) -> str:
        blob = json.dumps(self.fingerprint(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


# flag name -> (section, field)
DESIGN_FLAGS = {
    "input": "input_csv", "outcome": "outcome", "expensive": "expensive", "strata": "strata",
    "outcome_terms": "outcome_terms", "imputation_terms": "imputation_terms",
    "design": "kind", "n": "n", "fraction": "fraction", "priors": "priors", "floor": "floor",
}
SIMULATE_FLAGS = {
    "beta1": "beta1", "se": "sensitivity", "sp": "specificity", "N": "N", "n": "n", "reps": "reps",
    "fractions": "fractions", "prior_settings": "priors", "designs": "designs", "workers": "workers",
}


def _read_yaml(path: Path) -> dict:
    try:
        with open(path) as f:
            data = yaml.safe_load(f) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a mapping")
    return data


def resolve_config(args: argparse.Namespace) -> RunConfig:
    raw = _read_yaml(args.config) if args.config else {}
    raw["mode"] = args.command
    for key in ("seed", "output"):
        if getattr(args, key, None) is not None:
            raw[key] = getattr(args, key)
    flags = DESIGN_FLAGS if args.command == "design" else SIMULATE_FLAGS
    section = raw.setdefault(args.command, {}) or {}
    raw[args.command] = section
    for flag, field in flags.items():
        value = getattr(args, flag, None)
        if value is not None:
            section[field] = value
    if args.command == "simulate":
        section.setdefault("workers", os.cpu_count() or 1)
        if raw.get("seed") is not None:
            section["seed"] = raw["seed"]
    try:
        cfg = RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(f"invalid config: {exc.errors()[0]['loc']}: {exc.errors()[0]['msg']}") from exc
    if cfg.mode == "design":
        missing = [k for k in ("input_csv", "outcome", "expensive", "kind", "n")
                   if getattr(cfg.design, k) is None]
        if not cfg.design.strata:
            missing.append("strata")
        if missing:
            raise ConfigError(f"design mode needs {', '.join(missing)}")
    return cfg


def _priors(value) -> Optional[PriorPair]:
    if value is None or isinstance(value, PriorPair):
        return value
    try:
        return PriorPair.model_validate(_read_yaml(value))
    except ValidationError as exc:
        raise ConfigError(f"invalid prior file {value}: {exc.errors()[0]['msg']}") from exc


def design_request(cfg: RunConfig) -> DesignRequest:
    d = cfg.design
    return DesignRequest(
        columns=read_columns(d.input_csv), outcome=d.outcome, expensive=d.expensive, strata=d.strata,
        outcome_model=ModelTerms(response=d.outcome, terms=d.outcome_terms),
        imputation_model=ModelTerms(response=d.expensive, terms=d.imputation_terms),
        design=d.kind, n=d.n, seed=cfg.effective_seed, fraction=d.fraction, priors=_priors(d.priors),
        floor=d.floor)


class RemoteError(TwoPhaseError):
    def __init__(self, err: ErrorResponse):
        super().__init__(err.message)
        self.module = err.module
        self.code = err.exit_code


def _post(server: str, route: str, payload: BaseModel, response_model):
    import httpx

    try:
        r = httpx.post(server.rstrip("/") + route, content=payload.model_dump_json(),
                       headers={"content-type": "application/json"}, timeout=None)
    except httpx.HTTPError as exc:
        raise ConfigError(f"cannot reach server {server}: {exc}") from exc
    if r.status_code == 200:
        return response_model.model_validate_json(r.content)
    body = r.json()
    if "exit_code" in body:
        raise RemoteError(ErrorResponse.model_validate(body))
    raise ConfigError(f"server rejected the request: {body.get('detail', body)}")


def _header(cfg: RunConfig, extra: str = "") -> str:
    return f"# twophase {cfg.mode} config_sha256={cfg.config_hash()} seed={cfg.effective_seed}{extra}\n"


def _write_csv(path: Path, header: str, frame: pd.DataFrame) -> None:
    with open(path, "w", newline="") as f:
        f.write(header)
        frame.to_csv(f, index=False, lineterminator="\n")


def write_design(cfg: RunConfig, res: DesignResponse, input_hash: str) -> list[Path]:
    out = cfg.output
    out.mkdir(parents=True, exist_ok=True)
    header = _header(cfg, f" input_sha256={input_hash}")
    alloc = pd.DataFrame([{"stratum": r.stratum, **{f"{k}": v for k, v in r.cell.items()}, "N_h": r.N_h,
                           "n_wave1": r.n_wave1, "n_wave2": r.n_wave2, "n_h": r.n_h}
                          for r in res.allocation])
    _write_csv(out / "allocation.csv", header, alloc)
    _write_csv(out / "estimate.csv", header, pd.DataFrame([r.model_dump() for r in res.estimate]))
    _write_csv(out / "weights.csv", header, pd.DataFrame([r.model_dump() for r in res.weights]))
    with open(out / "waves.log", "w") as f:
        f.write(json.dumps({"config_sha256": cfg.config_hash(), "seed": cfg.effective_seed,
                            "input_sha256": input_hash, "design": res.design}, sort_keys=True) + "\n")
        for record in res.waves:
            f.write(json.dumps(record, sort_keys=True) + "\n")
    return [out / n for n in ("allocation.csv", "waves.log", "estimate.csv", "weights.csv")]


def write_metrics(cfg: RunConfig, res: SimulateResponse) -> Path:
    cfg.output.mkdir(parents=True, exist_ok=True)
    path = cfg.output / "metrics.csv"
    s = cfg.simulate
    extra = (f" beta1={s.beta1:g} se={s.sensitivity:g} sp={s.specificity:g}"
             f" N={s.N} n={s.n} reps={s.reps}")
    _write_csv(path, _header(cfg, extra), pd.DataFrame([r.model_dump() for r in res.rows]))
    return path


def cmd_design(cfg: RunConfig, server: Optional[str]) -> list[Path]:
    req = design_request(cfg)
    input_hash = hashlib.sha256(Path(cfg.design.input_csv).read_bytes()).hexdigest()
    log.info("design %s, n=%s, seed=%s", req.design, req.n, req.seed)
    res = _post(server, "/design", req, DesignResponse) if server else handlers.design(req)
    return write_design(cfg, res, input_hash)


def cmd_simulate(cfg: RunConfig, server: Optional[str]) -> Path:
    req = SimulateRequest.model_validate(cfg.simulate.model_dump())
    log.info("simulate beta1=%g se=%g sp=%g n=%d reps=%d workers=%d",
             req.beta1, req.sensitivity, req.specificity, req.n, req.reps, req.workers)
    res = _post(server, "/simulate", req, SimulateResponse) if server else handlers.simulate(req)
    return write_metrics(cfg, res)


def _csv_list(kind):
    def parse(text: str):
        try:
            return [kind(v) for v in text.split(",") if v.strip()]
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from exc
    return parse


def _fraction(text: str) -> float:
    if "/" in text:
        a, b = text.split("/", 1)
        return float(a) / float(b)
    return float(text)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="twophase", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML config; flags override its values")
    common.add_argument("--seed", type=int)
    common.add_argument("--output", "-o", type=Path, help="output directory")
    common.add_argument("--server", help="URL of a running service; run the request there")

    d = sub.add_parser("design", parents=[common], help="run one design on a cohort CSV")
    d.add_argument("--input", type=Path, help="cohort CSV")
    d.add_argument("--outcome")
    d.add_argument("--expensive")
    d.add_argument("--strata", type=_csv_list(str))
    d.add_argument("--outcome-terms", type=_csv_list(str))
    d.add_argument("--imputation-terms", type=_csv_list(str))
    d.add_argument("--design", help="design kind")
    d.add_argument("--n", type=int, help="phase-2 budget")
    d.add_argument("--fraction", type=_fraction, help="wave-1 share of n, e.g. 3/6")
    d.add_argument("--priors", type=Path, help="YAML prior file")
    d.add_argument("--floor", type=int)

    s = sub.add_parser("simulate", parents=[common], help="Monte Carlo design comparison")
    s.add_argument("--beta1", type=float)
    s.add_argument("--se", type=float, help="sensitivity of the surrogate")
    s.add_argument("--sp", type=float, help="specificity of the surrogate")
    s.add_argument("--N", type=int, help="cohort size")
    s.add_argument("--n", type=int, help="phase-2 budget")
    s.add_argument("--reps", type=int)
    s.add_argument("--fractions", type=_csv_list(_fraction))
    s.add_argument("--prior-settings", type=_csv_list(int))
    s.add_argument("--designs", type=_csv_list(str))
    s.add_argument("--workers", type=int, help="worker processes (default: all cores)")

    v = sub.add_parser("serve", help="start the HTTP service")
    v.add_argument("--host", default="127.0.0.1")
    v.add_argument("--port", type=int, default=8000)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s",
                        level=logging.WARNING - 10 * min(args.verbose, 2))
    if args.command == "serve":
        import uvicorn

        uvicorn.run("twophase.service.app:app", host=args.host, port=args.port)
        return 0
    try:
        cfg = resolve_config(args)
        if cfg.mode == "design":
            for path in cmd_design(cfg, args.server):
                print(path)
        else:
            print(cmd_simulate(cfg, args.server))
    except RemoteError as exc:
        print(f"error [{exc.module}]: {exc}", file=sys.stderr)
        return exc.code
    except TwoPhaseError as exc:
        print(f"error [{exc.module}]: {exc}", file=sys.stderr)
        return handlers.exit_code(exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
