"""CSV, JSON and SVG outputs.

Every CSV starts with a ``# schema_version: N`` line followed by the header
row. Floats are written with ``repr`` so identical runs give identical bytes.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .analysis import BinReport
from .trace import DecodeTrace, StepTrace, TokenRecord

SCHEMA_VERSION = 1
TRACE_COLUMNS = ("prompt", "step", "layer", "h", "fired", "theta_norm", "violation", "token", "label")
BIN_COLUMNS = ("bin", "count", "rate", "lo", "hi")
SVG_NS = "http://www.w3.org/2000/svg"


class ReportError(OSError):
    """A report file could not be written or read."""


class ReportStatus(enum.Enum):
    WRITTEN = "written"
    EMPTY = "empty"


@dataclass
class ReportResult:
    status: ReportStatus
    paths: list[Path] = field(default_factory=list)


# -- CSV ----------------------------------------------------------------------


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def csv_text(columns: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    buf.write(f"# schema_version: {SCHEMA_VERSION}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_cell(v) for v in row])
    return buf.getvalue()


def read_csv(path: str | Path) -> tuple[list[str], list[dict[str, str]]]:
    """Read a versioned CSV; returns ``(header, rows)``."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ReportError(f"cannot read {path}: {e}") from e
    lines = text.splitlines()
    if not lines or not lines[0].startswith("# schema_version:"):
        raise ValueError(f"{path}: missing schema_version line")
    version = int(lines[0].split(":", 1)[1])
    if version != SCHEMA_VERSION:
        raise ValueError(f"{path}: schema_version {version}, expected {SCHEMA_VERSION}")
    reader = csv.DictReader(lines[1:])
    return list(reader.fieldnames or []), list(reader)


def _label(rec: TokenRecord | None) -> str:
    if rec is None or not rec.is_object:
        return "none"
    return "hallucinated" if rec.hallucinated else "grounded"


def trace_rows(traces: Sequence[DecodeTrace]) -> list[tuple]:
    rows = []
    for pi, tr in enumerate(traces):
        by_step = {r.step: r for r in tr.tokens}
        for e in tr.entries:
            rec = by_step.get(e.step)
            rows.append(
                (pi, e.step, e.layer, e.h, e.fired, e.theta_norm, e.violation,
                 rec.token if rec else None, _label(rec))
            )
    return rows


def read_traces(path: str | Path) -> list[DecodeTrace]:
    """Rebuild labelled traces from ``traces.csv``.

    Token barriers are the mean of ``h`` over the layers recorded for that step.
    """
    header, rows = read_csv(path)
    missing = set(TRACE_COLUMNS) - set(header)
    if missing:
        raise ValueError(f"{path}: missing columns {sorted(missing)}")
    traces: dict[int, DecodeTrace] = {}
    steps: dict[tuple[int, int], list] = {}
    for r in rows:
        pi, step = int(r["prompt"]), int(r["step"])
        tr = traces.setdefault(pi, DecodeTrace())
        e = StepTrace(step, int(r["layer"]), float(r["h"]), r["fired"] == "1",
                      float(r["theta_norm"]), float(r["violation"]))
        tr.entries.append(e)
        slot = steps.setdefault((pi, step), [r["token"], r["label"], []])
        slot[2].append(e.h)
    for (pi, step), (token, label, hs) in sorted(steps.items()):
        if token == "":
            continue
        rec = TokenRecord(step=step, token=int(token), barrier=math.fsum(hs) / len(hs))
        rec.is_object = label != "none"
        rec.hallucinated = (label == "hallucinated") if rec.is_object else None
        traces[pi].tokens.append(rec)
    return [traces[k] for k in sorted(traces)]


# -- SVG ----------------------------------------------------------------------


def _svg(width: int, height: int, title: str) -> ET.Element:
    root = ET.Element("svg", {
        "xmlns": SVG_NS, "version": "1.1", "width": str(width), "height": str(height),
        "viewBox": f"0 0 {width} {height}",
    })
    ET.SubElement(root, "title").text = title
    ET.SubElement(root, "rect", {"x": "0", "y": "0", "width": str(width), "height": str(height), "fill": "white"})
    return root


def _text(parent, x, y, s, size=11, anchor="middle"):
    t = ET.SubElement(parent, "text", {
        "x": f"{x:.1f}", "y": f"{y:.1f}", "font-size": str(size), "text-anchor": anchor,
        "font-family": "sans-serif",
    })
    t.text = s


def _serialize(root: ET.Element) -> str:
    ET.indent(root)
    return '<?xml version="1.0" encoding="UTF-8"?>\n' + ET.tostring(root, encoding="unicode") + "\n"


def bar_chart_svg(
    labels: Sequence[str],
    values: Sequence[float],
    title: str,
    ylabel: str,
    errors: Sequence[tuple[float, float]] | None = None,
    ymax: float | None = None,
) -> str:
    """Vertical bars with optional (lo, hi) whiskers."""
    w, h = 640, 400
    left, right, top, bottom = 70, 20, 40, 60
    pw, ph = w - left - right, h - top - bottom
    root = _svg(w, h, title)
    _text(root, w / 2, 22, title, 14)
    peak = max([*values, *(e[1] for e in errors or [])], default=1.0)
    ymax = ymax if ymax is not None else (peak * 1.1 if peak > 0 else 1.0)
    ET.SubElement(root, "line", {"x1": str(left), "y1": str(top), "x2": str(left), "y2": str(top + ph), "stroke": "black"})
    ET.SubElement(root, "line", {"x1": str(left), "y1": str(top + ph), "x2": str(left + pw), "y2": str(top + ph), "stroke": "black"})
    for i in range(5):
        v = ymax * i / 4
        y = top + ph - ph * i / 4
        _text(root, left - 6, y + 4, f"{v:.3g}", 10, "end")
    n = max(len(values), 1)
    slot = pw / n
    yof = lambda v: top + ph - ph * min(max(v, 0.0), ymax) / ymax  # noqa: E731
    for i, (lab, v) in enumerate(zip(labels, values)):
        x = left + i * slot + slot * 0.15
        ET.SubElement(root, "rect", {
            "x": f"{x:.1f}", "y": f"{yof(v):.1f}", "width": f"{slot * 0.7:.1f}",
            "height": f"{top + ph - yof(v):.1f}", "fill": "#4C72B0",
        })
        if errors is not None:
            lo, hi = errors[i]
            cx = left + (i + 0.5) * slot
            ET.SubElement(root, "line", {"x1": f"{cx:.1f}", "y1": f"{yof(lo):.1f}", "x2": f"{cx:.1f}",
                                         "y2": f"{yof(hi):.1f}", "stroke": "black"})
            for yy in (yof(lo), yof(hi)):
                ET.SubElement(root, "line", {"x1": f"{cx - 5:.1f}", "y1": f"{yy:.1f}", "x2": f"{cx + 5:.1f}",
                                             "y2": f"{yy:.1f}", "stroke": "black"})
        _text(root, left + (i + 0.5) * slot, top + ph + 16, lab, 10)
    t = ET.SubElement(root, "text", {
        "x": "16", "y": f"{top + ph / 2:.1f}", "font-size": "11", "text-anchor": "middle",
        "font-family": "sans-serif", "transform": f"rotate(-90 16 {top + ph / 2:.1f})",
    })
    t.text = ylabel
    return _serialize(root)


def bins_svg(report: BinReport) -> str:
    return bar_chart_svg(
        [str(b.index + 1) for b in report.bins],
        [b.rate for b in report.bins],
        "Hallucination rate by barrier bin (low to high)",
        "hallucination rate",
        errors=[(b.lo, b.hi) for b in report.bins],
    )


def throughput_svg(tok_s: dict[str, float]) -> str:
    return bar_chart_svg(list(tok_s), list(tok_s.values()), "Decoding throughput", "tokens / s")


# -- emit ---------------------------------------------------------------------


def _write(path: Path, text: str, written: list[Path]) -> None:
    try:
        path.write_text(text)
    except OSError as e:
        raise ReportError(f"cannot write {path}: {e}") from e
    written.append(path)


def emit_reports(
    out_dir: str | Path,
    summary: dict | None = None,
    traces: Sequence[DecodeTrace] | None = None,
    bins: BinReport | None = None,
    ablations: dict[str, list[dict]] | None = None,
    throughput: dict | None = None,
) -> ReportResult:
    """Write whatever results are given. Nothing given means no files and ``EMPTY``."""
    if not any([summary, traces, bins and bins.bins, ablations, throughput]):
        return ReportResult(ReportStatus.EMPTY)
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ReportError(f"cannot create {out}: {e}") from e
    written: list[Path] = []
    if summary:
        _write(out / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n", written)
    if traces:
        _write(out / "traces.csv", csv_text(TRACE_COLUMNS, trace_rows(traces)), written)
    if bins is not None and bins.bins:
        rows = [(b.index + 1, b.count, b.rate, b.lo, b.hi) for b in bins.bins]
        _write(out / "bins.csv", csv_text(BIN_COLUMNS, rows), written)
        _write(out / "bins.svg", bins_svg(bins), written)
    for name, table in (ablations or {}).items():
        if not table:
            continue
        cols = list(table[0])
        _write(out / f"ablation_{name}.csv", csv_text(cols, [[r[c] for c in cols] for r in table]), written)
        _write(
            out / f"ablation_{name}.svg",
            bar_chart_svg([f"{r['value']}" for r in table], [r["hallucination_rate"] or 0.0 for r in table],
                          f"Hallucination rate across the {name} sweep", "hallucination rate"),
            written,
        )
    if throughput:
        _write(out / "throughput.json", json.dumps(throughput, indent=2, sort_keys=True) + "\n", written)
        tok = {"unsteered": throughput["tokens_per_s_unsteered"], "steered": throughput["tokens_per_s_steered"]}
        _write(out / "throughput.svg", throughput_svg(tok), written)
    return ReportResult(ReportStatus.WRITTEN, written)
