"""CSV / markdown report emission for sweeps and evaluations."""

from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Sequence

from .errors import FormatError, InputError
from .plotting import sweep_figure, truncation_figure
from .sweep import EvalRow, SweepReport, SweepRow

SWEEP_COLUMNS = ("rank", "config_id", "short_r1_t2a", "short_r1_a2t", "long_r1_t2a", "long_r1_a2t", "mean_r1")
EVAL_COLUMNS = ("benchmark", "direction", "k", "dim_level", "value", "delta_vs_full")


def _fmt(x: float) -> str:
    return repr(float(x))


def sweep_csv(report: SweepReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for rank, r in enumerate(report.sorted_rows(), 1):
        w.writerow([rank, r.config_id, _fmt(r.short_r1_t2a), _fmt(r.short_r1_a2t), _fmt(r.long_r1_t2a),
                    _fmt(r.long_r1_a2t), _fmt(r.mean_r1)])
    for cid, err in sorted(report.failures.items()):
        w.writerow(["failed", cid, "", "", "", "", err])
    return buf.getvalue()


def sweep_markdown(report: SweepReport) -> str:
    lines = ["| Rank | Configuration | Short T2A R@1 | Short A2T R@1 | Long T2A R@1 | Long A2T R@1 | Mean |",
             "|---:|:---|---:|---:|---:|---:|---:|"]
    for rank, r in enumerate(report.sorted_rows(), 1):
        cells = [r.short_r1_t2a, r.short_r1_a2t, r.long_r1_t2a, r.long_r1_a2t, r.mean_r1]
        lines.append(f"| {rank} | {r.config_id} | " + " | ".join(f"{100 * v:.1f}" for v in cells) + " |")
    if report.failures:
        lines += ["", "Failed configurations:", ""]
        lines += [f"- {cid}: {err}" for cid, err in sorted(report.failures.items())]
    return "\n".join(lines) + "\n"


def eval_csv(rows: Sequence[EvalRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EVAL_COLUMNS)
    for r in rows:
        w.writerow([r.benchmark, r.direction, r.k, r.dim_level, _fmt(r.value), _fmt(r.delta_vs_full)])
    return buf.getvalue()


def eval_markdown(rows: Sequence[EvalRow], model_name: str = "model", ks: Sequence[int] = (1, 5, 10)) -> str:
    """Retrieval table laid out benchmark x direction x R@K, with a delta sub-row for the narrowest level."""
    retrieval = [r for r in rows if not r.benchmark.startswith(("zsc", "mcq"))]
    benches = list(dict.fromkeys(r.benchmark for r in retrieval))
    dims = sorted({r.dim_level for r in retrieval}, reverse=True)
    lookup = {(r.benchmark, r.direction, r.k, r.dim_level): r for r in retrieval}
    cols = [(b, d, k) for b in benches for d in ("t2a", "a2t") for k in ks]
    header = "| Model | " + " | ".join(f"{b} {d.upper()} R@{k}" for b, d, k in cols) + " |"
    lines = [header, "|:---|" + "---:|" * len(cols)]
    if dims:
        full, narrow = dims[0], dims[-1]
        lines.append(f"| {model_name} (d={full}) | "
                     + " | ".join(f"{100 * lookup[(b, d, k, full)].value:.1f}" for b, d, k in cols) + " |")
        if narrow != full:
            frac = f"1/{full // narrow}"
            lines.append(f"| &nbsp;&nbsp;Δ M-{frac} (d={narrow}) | "
                         + " | ".join(f"{100 * lookup[(b, d, k, narrow)].delta_vs_full:+.1f}" for b, d, k in cols)
                         + " |")
    extra = [r for r in rows if r.benchmark.startswith(("zsc", "mcq"))]
    if extra:
        lines += ["", "| Task | Accuracy |", "|:---|---:|"]
        lines += [f"| {r.benchmark} | {100 * r.value:.1f} |" for r in extra]
    return "\n".join(lines) + "\n"


def emit_report(results, path: str | Path, fmt: str | None = None, figure: bool = True) -> Path:
    """Write ``results`` (a ``SweepReport`` or a list of ``EvalRow``) as csv or markdown.

    The format defaults to the file suffix. A PNG figure is rendered next to
    the report unless ``figure`` is false.
    """
    path = Path(path)
    fmt = fmt or ("markdown" if path.suffix.lower() in (".md", ".markdown") else "csv")
    if fmt not in ("csv", "markdown"):
        raise InputError(f"unknown report format {fmt!r}")
    if isinstance(results, SweepReport):
        if not results.rows and not results.failures:
            raise InputError("empty sweep report")
        text = sweep_csv(results) if fmt == "csv" else sweep_markdown(results)
        draw = (lambda p: sweep_figure(results.sorted_rows(), p)) if results.rows else None
    else:
        rows = list(results)
        if not rows:
            raise InputError("no evaluation results to report")
        text = eval_csv(rows) if fmt == "csv" else eval_markdown(rows)
        draw = lambda p: truncation_figure(rows, p)  # noqa: E731
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
        if figure and draw is not None:
            draw(path.with_suffix(".png"))
    except OSError as exc:
        raise FormatError(f"cannot write report {path}: {exc}") from exc
    return path


def read_sweep_csv(path: str | Path) -> list[SweepRow]:
    with open(path, newline="") as fh:
        rows = []
        for rec in csv.DictReader(fh):
            if rec["rank"] == "failed":
                continue
            rows.append(SweepRow(rec["config_id"], float(rec["short_r1_t2a"]), float(rec["short_r1_a2t"]),
                                 float(rec["long_r1_t2a"]), float(rec["long_r1_a2t"])))
        return rows


def read_eval_csv(path: str | Path) -> list[EvalRow]:
    with open(path, newline="") as fh:
        return [EvalRow(r["benchmark"], r["direction"], int(r["k"]), int(r["dim_level"]), float(r["value"]),
                        float(r["delta_vs_full"])) for r in csv.DictReader(fh)]
