"""
Report envelope models for analysis runs.

Provides:
- Per-analysis result records (ok / failed / skipped)
- The run report with config echo, tolerance set and timing block
- Canonical JSON serialization (byte-identical outside the timing block)
- Result helpers
"""

import json
import math
from datetime import datetime, timezone
from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, Field


class AnalysisResult(BaseModel):
    """Outcome of one analysis of a run."""

    name: str
    status: Literal["ok", "failed", "skipped"] = "ok"
    payload: Dict[str, Any] = Field(default_factory=dict)
    error: Optional[Dict[str, Any]] = None
    artifacts: List[str] = Field(default_factory=list)


class TimingBlock(BaseModel):
    """Everything that is allowed to differ between two identical runs."""

    started_at: datetime = Field(default_factory=lambda: datetime.now(timezone.utc))
    durations_ms: Dict[str, float] = Field(default_factory=dict)
    total_ms: float = 0.0


class Report(BaseModel):
    """
    Full run report.

    Usage:
        report = Report(version="1.0.0", input_hash=h, config=cfg, tolerances=tol)
        report.analyses.append(success("observability", certificate.to_dict()))
    """

    tool: str = "wavecontrol"
    version: str
    input_hash: str
    config: Dict[str, Any]
    tolerances: Dict[str, float]
    analyses: List[AnalysisResult] = Field(default_factory=list)
    exit_code: int = 0
    timing: TimingBlock = Field(default_factory=TimingBlock)

    def result(self, name: str) -> Optional[AnalysisResult]:
        for item in self.analyses:
            if item.name == name:
                return item
        return None

    def to_json(self) -> str:
        """Canonical JSON: sorted keys, shortest round-trip float repr."""
        return canonical_json(self.model_dump(mode="json"))


def _sanitize(value: Any) -> Any:
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return value
    if isinstance(value, dict):
        return {str(k): _sanitize(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_sanitize(v) for v in value]
    return value


def canonical_json(data: Any) -> str:
    """JSON text with sorted keys and non-finite floats spelled as strings."""
    return json.dumps(_sanitize(data), sort_keys=True, separators=(", ", ": "), allow_nan=False)


def success(name: str, payload: Dict[str, Any], artifacts: Optional[List[str]] = None) -> AnalysisResult:
    """Create a successful analysis result."""
    return AnalysisResult(name=name, status="ok", payload=payload, artifacts=artifacts or [])


def failure(name: str, error: Dict[str, Any], payload: Optional[Dict[str, Any]] = None) -> AnalysisResult:
    """Create a failed analysis result carrying the module error."""
    return AnalysisResult(name=name, status="failed", payload=payload or {}, error=error)


def skipped(name: str, reason: str) -> AnalysisResult:
    """Create a skipped analysis result (not applicable to this system)."""
    return AnalysisResult(name=name, status="skipped", payload={"reason": reason})
