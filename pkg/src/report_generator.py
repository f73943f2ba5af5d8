"""
Wave Control Toolkit - Report Generator
=======================================

Writes the artifacts of an analysis run: the canonical ``report.json``,
CSV plot data and a Markdown summary rendered with Jinja2.

Features:
    - report.json with sorted keys and shortest round-trip floats
    - CSV plot data with 17 significant digits (locale independent)
    - Markdown summary from templates/summary.md.j2, inline fallback
    - Input hash of the canonical run config

Example:
    >>> from src.report_generator import ReportGenerator
    >>> reporter = ReportGenerator(output_dir="./reports/cascade")
    >>> reporter.emit_plotdata("trace", ("t", "value"), trace.rows())
    >>> reporter.write_report(report)
    >>> reporter.render_summary(report)

Environment Variables:
    WAVECTRL_OUTPUT_DIR: Default directory for run artifacts
"""

import csv
import hashlib
import math
import os
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Sequence

import numpy as np
from jinja2 import Environment, FileSystemLoader, TemplateError, select_autoescape

from .core.exceptions import ArtifactWriteError
from .core.logging_config import get_logger
from .core.responses import Report, canonical_json

logger = get_logger(__name__)

SUMMARY_TEMPLATE = "summary.md.j2"

VERDICT_BADGES = {
    "WeaklyObservable": "[OK]",
    "NotObservable": "[NO]",
    "Holds": "[OK]",
    "Fails": "[NO]",
    "Inconclusive": "[??]",
}


def input_hash(config: Dict[str, Any]) -> str:
    """sha256 of the canonical JSON of a run config."""
    return hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()


def format_csv_value(value: Any) -> str:
    """17 significant digits for floats; repr() is locale independent."""
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return format(value, ".17g")
    return str(value)


class ReportGenerator:
    """
    Artifact writer for one run directory.

    Attributes:
        output_dir (Path): Directory receiving every artifact of the run
        templates_dir (str): Directory with Jinja2 templates
        jinja_env (Environment): Configured Jinja2 environment
        artifacts (list): File names written so far, in order
    """

    def __init__(self, output_dir: Optional[str] = None, templates_dir: Optional[str] = None):
        """
        Args:
            output_dir: Run directory. Default: WAVECTRL_OUTPUT_DIR or ./reports
            templates_dir: Template directory. Default: ../templates relative to src
        """
        self.output_dir = Path(output_dir or os.getenv("WAVECTRL_OUTPUT_DIR", "./reports"))
        try:
            self.output_dir.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise ArtifactWriteError(str(self.output_dir), original_error=e)

        if templates_dir:
            self.templates_dir = templates_dir
        else:
            self.templates_dir = os.path.join(os.path.dirname(os.path.dirname(__file__)), "templates")

        self.jinja_env = Environment(
            loader=FileSystemLoader(self.templates_dir),
            autoescape=select_autoescape(["html", "xml"]),
            keep_trailing_newline=True,
        )
        self.jinja_env.filters["format_float"] = self._format_float
        self.jinja_env.filters["verdict_badge"] = self._verdict_badge

        self.artifacts = []
        logger.info("ReportGenerator initialized", extra_fields={"output_dir": str(self.output_dir)})

    def _path(self, filename: str) -> Path:
        return self.output_dir / filename

    def _write_text(self, filename: str, text: str) -> Path:
        path = self._path(filename)
        try:
            with open(path, "w", encoding="utf-8", newline="\n") as f:
                f.write(text)
        except OSError as e:
            raise ArtifactWriteError(str(path), original_error=e)
        if filename not in self.artifacts:
            self.artifacts.append(filename)
        return path

    # ------------------------------------------------------------------
    # CSV plot data
    # ------------------------------------------------------------------

    def emit_plotdata(self, name: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
        """
        Write ``<name>.csv`` with a header line and one line per row.

        Returns:
            The file name relative to the run directory
        """
        filename = f"{name}.csv"
        path = self._path(filename)
        count = 0
        try:
            with open(path, "w", encoding="utf-8", newline="") as f:
                writer = csv.writer(f, lineterminator="\n")
                writer.writerow(header)
                for row in rows:
                    if len(row) != len(header):
                        raise ValueError(f"row of length {len(row)} under a header of {len(header)} columns")
                    writer.writerow([format_csv_value(v) for v in row])
                    count += 1
        except (OSError, ValueError) as e:
            raise ArtifactWriteError(str(path), original_error=e)
        if filename not in self.artifacts:
            self.artifacts.append(filename)
        logger.debug("Plot data written", extra_fields={"file": filename, "rows": count})
        return filename

    def emit_field(self, name: str, field) -> str:
        """(t, x, p1, p2, q1, q2) rows, one per grid node."""
        return self.emit_plotdata(name, ("t", "x", "p1", "p2", "q1", "q2"), field.rows())

    def emit_trace(self, name: str, trace) -> str:
        return self.emit_plotdata(name, ("t", "value"), trace.rows())

    def emit_singular_values(self, name: str, values) -> str:
        """Singular values sorted nonincreasing, with their 1-based index."""
        ordered = np.sort(np.asarray(values, dtype=float))[::-1]
        return self.emit_plotdata(name, ("k", "sigma"), ((k + 1, v) for k, v in enumerate(ordered)))

    # ------------------------------------------------------------------
    # Report and summary
    # ------------------------------------------------------------------

    def write_report(self, report: Report) -> Path:
        path = self._write_text("report.json", report.to_json() + "\n")
        logger.info("Report saved", extra_fields={"path": str(path), "exit_code": report.exit_code})
        return path

    def render_summary(self, report: Report) -> Path:
        """Render summary.md; the inline template is used when the file template is unusable."""
        context = self._prepare_context(report)
        try:
            template = self.jinja_env.get_template(SUMMARY_TEMPLATE)
            text = template.render(**context)
        except TemplateError as e:
            logger.warning(f"Summary template unusable, falling back to inline: {e}")
            text = self._generate_fallback_summary(context)
        return self._write_text("summary.md", text)

    def _prepare_context(self, report: Report) -> Dict[str, Any]:
        rows = []
        for item in report.analyses:
            payload = item.payload
            rows.append({
                "name": item.name,
                "status": item.status,
                "verdict": payload.get("verdict", payload.get("reason", "")),
                "explanation": payload.get("explanation", ""),
                "error": (item.error or {}).get("message", ""),
                "artifacts": item.artifacts,
            })
        return {
            "tool": report.tool,
            "version": report.version,
            "input_hash": report.input_hash,
            "config": report.config,
            "tolerances": report.tolerances,
            "analyses": rows,
            "exit_code": report.exit_code,
            "total_ms": report.timing.total_ms,
        }

    def _generate_fallback_summary(self, context: Dict[str, Any]) -> str:
        lines = [
            f"# {context['tool']} {context['version']}",
            "",
            f"Input hash: `{context['input_hash']}`",
            f"Exit status: {context['exit_code']}",
            "",
        ]
        for row in context["analyses"]:
            verdict = self._verdict_badge(row["verdict"]) if row["status"] == "ok" else row["status"]
            lines.append(f"- {row['name']}: {verdict}")
            if row["error"]:
                lines.append(f"  - error: {row['error']}")
        return "\n".join(lines) + "\n"

    # Template filters

    @staticmethod
    def _format_float(value: Any, digits: int = 6) -> str:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return format(float(value), f".{digits}g")
        return str(value)

    @staticmethod
    def _verdict_badge(verdict: Any) -> str:
        text = str(verdict)
        badge = VERDICT_BADGES.get(text)
        return f"{badge} {text}" if badge else text
