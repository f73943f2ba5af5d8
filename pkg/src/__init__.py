"""
Wave Control Toolkit
====================

Boundary controllability analysis for two coupled one-dimensional wave
equations with a single Dirichlet control, written as first-order Riemann
systems p_t + p_x = ..., q_t - q_x = ... on (0, T) x (0, 1).

Components:
- expr: coefficient expression language (parse, evaluate, compile)
- smallmat: closed-form 2x2 linear algebra (spectra, exponentials, ranks)
- characteristics: the phi function along broken characteristics
- solver: characteristic solver, finite-difference oracle, D_T matrix
- observability: weak-observability criteria and counterexample witnesses
- uniqcont: unique continuation tests (constant, Fattorini, cascade kernels)
- report_generator: JSON / CSV / Markdown artifacts
- analysis_runner: orchestrates the analyses of a run

Core:
- exceptions: error hierarchy with stable codes and CLI exit codes
- logging_config: structured logging with run IDs
- settings: layered tolerances and grid sizes
- responses: report envelope models

Usage:
    from src.core import get_settings
    from src.analysis_runner import AnalysisRunner, RunConfig

    config = RunConfig.from_file("configs/cascade.json")
    runner = AnalysisRunner(get_settings())
    report = runner.run(config, ["observability", "uc"])
"""

__version__ = "1.0.0"
