"""
Wave Control Toolkit - Analysis Runner
======================================

Orchestrates the analyses of one run config and collects their
certificates into a Report.

Workflow:
    1. Validate the JSON run config (pydantic)
    2. Merge tolerances and grid sizes over the process settings
    3. Build the SystemSpec (M, B, a, b, T)
    4. Run the selected analyses in a fixed order:
       simulate, observability, uc, fattorini, fredholm, compactness
    5. Write CSV plot data, report.json and summary.md

A WaveControlError inside one analysis is recorded as a failed entry and the
run continues; the report's exit code is then the largest exit code seen.

Example:
    >>> from src.analysis_runner import AnalysisRunner, RunConfig
    >>> config = RunConfig.from_file("configs/cascade.json")
    >>> runner = AnalysisRunner(output_dir="./reports/cascade")
    >>> report = runner.run(config, ["observability", "fredholm"])
    >>> report.result("observability").payload["verdict"]
    'WeaklyObservable'
"""

import json
import math
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from . import __version__
from .core.exceptions import ConfigValidationError, WaveControlError
from .core.logging_config import LogContext, Timer, get_logger, set_run_id
from .core.responses import AnalysisResult, Report, failure, skipped, success
from .core.settings import GridSettings, Settings, Tolerances, get_settings
from .expr import depends_on, evaluate, parse
from .observability import (
    check_weak_observability,
    stack_minor_verdict,
    svd_observability_constant,
)
from .report_generator import ReportGenerator, input_hash
from .solver import Grid, StateH, SystemSpec, dt_matrix, fd_oracle, solve_diag, solve_full
from .uniqcont import (
    cascade_uc,
    constant_case,
    fattorini_scan,
    is_cascade,
    moment_condition_report,
)

logger = get_logger(__name__)

ANALYSES = ("simulate", "observability", "uc", "fattorini", "fredholm", "compactness")

# mean-zero smooth datum used when the config gives none
DEFAULT_INITIAL_DATA = {
    "p": ["sin(2*pi*x)", "cos(pi*x)"],
    "q": ["cos(2*pi*x)", "0"],
}


# =============================================================================
# Run config
# =============================================================================

class InitialData(BaseModel):
    """Initial (p, q) for the simulate analysis, as expressions in x."""

    model_config = ConfigDict(extra="forbid")

    p: List[str] = Field(min_length=2, max_length=2)
    q: List[str] = Field(min_length=2, max_length=2)

    @field_validator("p", "q")
    @classmethod
    def check_expressions(cls, value: List[str]) -> List[str]:
        for source in value:
            _check_expression(source)
        return value


def _check_expression(source: str) -> None:
    try:
        parse(source)
    except WaveControlError as e:
        raise ValueError(e.message)


def _first_message(error: ValidationError) -> str:
    first = error.errors()[0]
    return f"{'.'.join(str(part) for part in first['loc'])}: {first['msg']}"


class RunConfig(BaseModel):
    """
    One system and the analyses to run on it.

    Usage:
        config = RunConfig(M=[[0, 1], [0, 0]], B=[0, 1], a="1", b="0", T=4.0,
                           analyses=["observability"])
    """

    model_config = ConfigDict(extra="forbid")

    M: List[List[float]]
    B: List[float]
    a: str = "0"
    b: str = "0"
    T: float = Field(gt=0)
    analyses: List[str] = Field(default_factory=list)
    tolerances: Dict[str, float] = Field(default_factory=dict)
    grids: Dict[str, Any] = Field(default_factory=dict)
    initial_data: Optional[InitialData] = None
    fredholm_pairs: Optional[List[Tuple[int, int]]] = None
    output_dir: Optional[str] = None

    @field_validator("M")
    @classmethod
    def check_matrix(cls, value: List[List[float]]) -> List[List[float]]:
        if len(value) != 2 or any(len(row) != 2 for row in value):
            raise ValueError("M must be a 2x2 matrix")
        if not all(math.isfinite(v) for row in value for v in row):
            raise ValueError("M entries must be finite")
        return value

    @field_validator("B")
    @classmethod
    def check_vector(cls, value: List[float]) -> List[float]:
        if len(value) != 2 or not all(math.isfinite(v) for v in value):
            raise ValueError("B must be a finite 2-vector")
        return value

    @field_validator("a", "b")
    @classmethod
    def check_coefficient(cls, value: str) -> str:
        _check_expression(value)
        return value

    @field_validator("T")
    @classmethod
    def check_horizon(cls, value: float) -> float:
        if not math.isfinite(value):
            raise ValueError("T must be finite")
        return value

    @field_validator("analyses")
    @classmethod
    def check_analyses(cls, value: List[str]) -> List[str]:
        unknown = [name for name in value if name not in ANALYSES]
        if unknown:
            raise ValueError(f"unknown analyses {unknown}; choose from {list(ANALYSES)}")
        return value

    @field_validator("tolerances")
    @classmethod
    def check_tolerances(cls, value: Dict[str, float]) -> Dict[str, float]:
        unknown = sorted(set(value) - set(Tolerances.model_fields))
        if unknown:
            raise ValueError(f"unknown tolerances {unknown}")
        try:
            Tolerances(**value)
        except ValidationError as e:
            raise ValueError(_first_message(e))
        return value

    @field_validator("grids")
    @classmethod
    def check_grids(cls, value: Dict[str, Any]) -> Dict[str, Any]:
        unknown = sorted(set(value) - set(GridSettings.model_fields))
        if unknown:
            raise ValueError(f"unknown grid settings {unknown}")
        try:
            GridSettings(**value)
        except ValidationError as e:
            raise ValueError(_first_message(e))
        return value

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        """
        Validate a parsed config.

        Raises:
            ConfigValidationError: naming the first offending field path
        """
        try:
            return cls.model_validate(data)
        except ValidationError as e:
            first = e.errors()[0]
            field_path = ".".join(str(part) for part in first["loc"]) or "<root>"
            raise ConfigValidationError(
                f"{field_path}: {first['msg']}",
                field_path=field_path,
                details={"errors": e.error_count()},
                original_error=e,
            )

    @classmethod
    def from_file(cls, path: str) -> "RunConfig":
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except FileNotFoundError as e:
            raise ConfigValidationError(f"config file not found: {path}", field_path="<file>", original_error=e)
        except json.JSONDecodeError as e:
            raise ConfigValidationError(
                f"config is not valid JSON: {e.msg} at line {e.lineno}",
                field_path="<file>",
                original_error=e,
            )
        if not isinstance(data, dict):
            raise ConfigValidationError("config must be a JSON object", field_path="<root>")
        return cls.from_dict(data)

    def build_spec(self, tolerances: Tolerances, grids: GridSettings) -> SystemSpec:
        return SystemSpec.create(
            self.M, self.B, self.a, self.b, self.T,
            quad_tol=tolerances.quad_tol,
            max_quad_depth=grids.max_quad_depth,
        )


# =============================================================================
# Runner
# =============================================================================

class AnalysisRunner:
    """
    Executes the analyses of one RunConfig.

    Attributes:
        settings (Settings): Process-wide defaults
        output_dir (str): Run directory, or None for config / settings default
        workers (int): Thread count handed to the modules that parallelize
    """

    def __init__(self, settings: Optional[Settings] = None, output_dir: Optional[str] = None, workers: int = 1):
        self.settings = settings or get_settings()
        self.output_dir = output_dir
        self.workers = workers

    def _merged(self, config: RunConfig) -> Tuple[Tolerances, GridSettings]:
        tolerances = Tolerances(**{**self.settings.tolerances.model_dump(), **config.tolerances})
        grids = GridSettings(**{**self.settings.grids.model_dump(), **config.grids})
        return tolerances, grids

    def run(self, config: RunConfig, analyses: Optional[Sequence[str]] = None) -> Report:
        """
        Run the selected analyses (default: those named in the config).

        Returns:
            The Report; report.json and summary.md are already written.
        """
        selected = list(analyses) if analyses is not None else list(config.analyses)
        unknown = [name for name in selected if name not in ANALYSES]
        if unknown:
            raise ConfigValidationError(f"unknown analyses {unknown}", field_path="analyses")
        selected = [name for name in ANALYSES if name in selected]

        config = config.model_copy(update={"analyses": selected})
        tolerances, grids = self._merged(config)
        echo = config.model_dump(mode="json", exclude={"output_dir"})
        report = Report(
            version=__version__,
            input_hash=input_hash(echo),
            config=echo,
            tolerances=tolerances.model_dump(),
        )
        out = self.output_dir or config.output_dir or self.settings.output_dir
        reporter = ReportGenerator(output_dir=out)
        spec = config.build_spec(tolerances, grids)

        run_id = set_run_id()
        logger.info(
            "Starting analysis run",
            extra_fields={"run_id": run_id, "analyses": selected, "input_hash": report.input_hash},
        )
        with Timer() as total:
            for name in selected:
                handler: Callable = getattr(self, f"_run_{name}")
                with LogContext(analysis=name, T=spec.T), Timer() as timer:
                    try:
                        result = handler(spec, config, tolerances, grids, reporter)
                    except WaveControlError as e:
                        logger.error(f"Analysis {name} failed: {e}", extra_fields={"code": e.error_code.value})
                        result = failure(name, e.to_dict(include_details=True))
                        report.exit_code = max(report.exit_code, e.exit_code)
                report.analyses.append(result)
                report.timing.durations_ms[name] = timer.duration_ms
        report.timing.total_ms = total.duration_ms

        reporter.write_report(report)
        reporter.render_summary(report)
        logger.info("Analysis run finished", extra_fields={"exit_code": report.exit_code, "output_dir": str(out)})
        return report

    # ------------------------------------------------------------------
    # Analyses
    # ------------------------------------------------------------------

    @staticmethod
    def _stride(steps: int, slices: int) -> int:
        stride = max(1, steps // max(1, slices - 1))
        while steps % stride:
            stride -= 1
        return stride

    def _run_simulate(self, spec, config, tolerances, grids, reporter) -> AnalysisResult:
        data = config.initial_data or InitialData(**DEFAULT_INITIAL_DATA)
        state = StateH.from_expressions(data.p, data.q, grids.sim_nx)
        steps = int(round(spec.T * grids.sim_nx))
        grid = Grid(nx=grids.sim_nx, T=spec.T, stride=self._stride(steps, grids.t_slices))

        full = solve_full(
            spec, state, grid,
            picard_tol=tolerances.picard_tol,
            max_iterations=grids.picard_max_iterations,
            mean_zero_tol=tolerances.mean_zero_tol,
        )
        diag = solve_diag(spec, state, 0.0, grid, mean_zero_tol=tolerances.mean_zero_tol)
        oracle = fd_oracle(spec, state, grid, mean_zero_tol=tolerances.mean_zero_tol)
        observation = full.observation(spec.B)

        artifacts = [
            reporter.emit_field("field_full", full),
            reporter.emit_field("field_diag", diag),
            reporter.emit_plotdata("observation", ("t", "value"), zip(full.t, observation)),
        ]
        payload = {
            "grid": grid.to_dict(),
            "picard": full.history.to_dict() if full.history else None,
            "boundary_residual": full.boundary_residual(),
            "h_norm_initial": float(full.h_norms()[0]),
            "h_norm_final": float(full.h_norms()[-1]),
            "oracle_l2_distance": full.l2_distance(oracle),
            "diag_l2_distance": full.l2_distance(diag),
        }
        return success("simulate", payload, artifacts)

    def _run_observability(self, spec, config, tolerances, grids, reporter) -> AnalysisResult:
        cert = check_weak_observability(spec, x_nodes=grids.x_nodes, tolerances=tolerances)
        minor = stack_minor_verdict(spec, x_nodes=grids.x_nodes, tolerances=tolerances)
        constant = svd_observability_constant(spec, nx=grids.svd_nx)

        ts = np.linspace(0.0, spec.T, grids.x_nodes + 1)
        values, errors = spec.table.phi_many(ts)
        artifacts = [reporter.emit_plotdata("phi_table", ("t", "phi", "error"), zip(ts, values, errors))]
        if cert.witness is not None:
            artifacts.append(
                reporter.emit_plotdata("witness", ("x", "p1", "p2", "q1", "q2"), cert.witness.rows())
            )
        payload = cert.to_dict()
        payload["stack_minor"] = {"verdict": minor.verdict.value, "margins": minor.margins, "failure": minor.failure}
        payload["svd"] = constant.to_dict()
        return success("observability", payload, artifacts)

    def _run_uc(self, spec, config, tolerances, grids, reporter) -> AnalysisResult:
        a, b = spec.fields.a, spec.fields.b
        if any(depends_on(e, v) for e in (a, b) for v in ("t", "x")):
            return skipped("uc", "the constant-coefficient criterion needs constant a and b")
        verdict = constant_case(evaluate(a, 0.0, 0.0), evaluate(b, 0.0, 0.0), spec.M, grids.n_max, tolerances)
        return success("uc", verdict.to_dict())

    def _run_fattorini(self, spec, config, tolerances, grids, reporter) -> AnalysisResult:
        if not spec.fields.is_autonomous:
            return skipped("fattorini", "the frequency scan needs time-independent coefficients")
        result = fattorini_scan(
            spec,
            tol=tolerances.ode_tol,
            tolerances=tolerances,
            grids=grids,
            enforce_mean_zero=True,
        )
        artifact = reporter.emit_plotdata("fattorini", ("re", "im", "sigma4"), result.rows())
        return success("fattorini", result.to_verdict().to_dict(), [artifact])

    def _run_fredholm(self, spec, config, tolerances, grids, reporter) -> AnalysisResult:
        if not is_cascade(spec):
            return skipped("fredholm", "the Fredholm criterion applies to the cascade M = [[0, 1], [0, 0]], B = (0, 1)")
        if spec.T < 4.0:
            return skipped("fredholm", "the Fredholm criterion needs T >= 4")
        verdict = cascade_uc(
            spec,
            N=grids.nystrom_nodes,
            tolerances=tolerances,
            pairs=config.fredholm_pairs,
            workers=self.workers,
        )
        payload = verdict.to_dict()
        if not depends_on(spec.fields.a, "t"):
            payload["moments"] = moment_condition_report(spec.fields.a, grids.n_max, tolerances.quad_tol)
        rows = (
            (pair["k"], pair["l"], z[0], z[1])
            for pair in verdict.spectral
            for z in pair["nearest"]
        )
        artifact = reporter.emit_plotdata("nystrom_spectrum", ("k", "l", "re", "im"), rows)
        return success("fredholm", payload, [artifact])

    def _run_compactness(self, spec, config, tolerances, grids, reporter) -> AnalysisResult:
        dt = dt_matrix(
            spec,
            grids.compactness_nx,
            picard_tol=tolerances.picard_tol,
            max_iterations=grids.picard_max_iterations,
            workers=self.workers,
        )
        artifact = reporter.emit_singular_values("dt_singular_values", dt.singular_values)
        sv = dt.singular_values
        payload = {
            "shape": list(dt.matrix.shape),
            "sigma_1": float(sv[0]) if sv.size else 0.0,
            "ratios": dt.ratios(20).tolist(),
        }
        return success("compactness", payload, [artifact])


def run_config_file(
    path: str,
    analyses: Optional[Sequence[str]] = None,
    output_dir: Optional[str] = None,
    settings: Optional[Settings] = None,
) -> Report:
    """Load a config file and run it; input errors propagate as ConfigValidationError."""
    config = RunConfig.from_file(path)
    return AnalysisRunner(settings, output_dir=output_dir).run(config, analyses)
