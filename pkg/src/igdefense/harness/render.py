"""Deterministic rendering of evaluation reports: csv, json, markdown tables and plots.

A *table* is a list of ``(label, EvaluationReport)`` rows; a single report
renders as a one-row table labelled ``model``. Wall-clock runtimes are kept
out of csv and markdown output so that reruns produce identical bytes.
"""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path

from ..evaluation import ActivationShiftReport, EvaluationReport
from ..io_utils import atomic_write_bytes, atomic_write_text

FORMATS = ("csv", "json", "markdown", "plot")

# attack id -> column label, in the order of the full report layout
COLUMN_LABELS = {
    "autoattack-lite": "AA",
    "rays": "RayS",
    "apgd-eot": "APGD+EoT",
    "tr-apgd-ce": "Tr-APGD-CE",
    "tr-apgd-cw": "Tr-APGD-CW",
    "tr-apgd-t-dlr": "Tr-APGD-tgt-DLR",
    "tr-autoattack-lite": "Tr-AA",
    "tr-rays": "Tr-RayS",
    "tr-apgd-eot": "Tr-APGD+EoT",
}


class RenderError(ValueError):
    pass


def as_table(obj) -> list[tuple[str, EvaluationReport]]:
    if isinstance(obj, EvaluationReport):
        return [("model", obj)]
    rows = list(obj)
    if not rows:
        raise RenderError("nothing to render")
    return rows


def attack_columns(table) -> list[str]:
    seen = []
    for _, rep in table:
        for a in rep.per_attack_acc:
            if a not in seen:
                seen.append(a)
    order = list(COLUMN_LABELS)
    known = [a for a in order if a in seen]
    return known + sorted(a for a in seen if a not in COLUMN_LABELS)


def column_label(attack_id: str) -> str:
    return COLUMN_LABELS.get(attack_id, attack_id)


def _fmt(v, digits=2):
    return "" if v is None else f"{v:.{digits}f}"


# -- table formats ------------------------------------------------------------


def render_csv(obj) -> str:
    """Flat csv, one row per (model, metric); metrics are clean, each attack id and iwwc."""
    table = as_table(obj)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "attack", "accuracy"])
    for label, r in table:
        w.writerow([label, "clean", _fmt(r.clean_acc, 4)])
        for a in attack_columns([(label, r)]):
            w.writerow([label, a, _fmt(r.per_attack_acc[a], 4)])
        if r.iwwc_acc is not None:
            w.writerow([label, "iwwc", _fmt(r.iwwc_acc, 4)])
    return buf.getvalue()


def render_json(obj, extra: dict | None = None) -> str:
    if isinstance(obj, EvaluationReport) and not extra:
        return obj.to_json()
    table = as_table(obj)
    payload = {"rows": [{"label": label, "report": r.to_dict()} for label, r in table], **(extra or {})}
    return json.dumps(payload, indent=2, sort_keys=True)


def parse_json(text: str):
    """Inverse of ``render_json``: an EvaluationReport or a table."""
    d = json.loads(text)
    if "rows" in d:
        return [(row["label"], EvaluationReport.from_dict(row["report"])) for row in d["rows"]]
    return EvaluationReport.from_dict(d)


def render_markdown(obj, layout: str = "summary", deltas: bool = True) -> str:
    """Markdown table.

    ``summary`` gives Clean / Robust (AA) / Robust (IW-WC); ``full`` lists
    every attack column between Clean and IW-WC. With ``deltas`` the rows
    after the first show their IW-WC change against the first row.
    """
    if layout not in ("summary", "full"):
        raise RenderError(f"unknown markdown layout {layout!r}")
    table = as_table(obj)
    cols = attack_columns(table)
    if layout == "summary":
        cols = [c for c in cols if c == "autoattack-lite"]
    has_iwwc = any(r.iwwc_acc is not None and r.per_attack_acc for _, r in table)
    header = ["Model", "Clean"] + ["Robust (AA)" if layout == "summary" else column_label(c) for c in cols]
    if has_iwwc:
        header.append("Robust (IW-WC)")
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join(["---"] + [":---:"] * (len(header) - 1)) + "|"]
    ref = table[0][1].iwwc_acc
    for i, (label, r) in enumerate(table):
        cells = [label, _fmt(r.clean_acc)] + [_fmt(r.per_attack_acc.get(c)) for c in cols]
        if has_iwwc:
            cell = _fmt(r.iwwc_acc)
            if deltas and i > 0 and ref is not None and r.iwwc_acc is not None:
                cell += f" ({r.iwwc_acc - ref:+.2f})"
            cells.append(cell)
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


# -- plots -----------------------------------------------------------------------


def _pyplot():
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError as exc:  # plotting is an optional extra
        raise RenderError("plotting needs matplotlib (pip install 'igdefense[plot]')") from exc
    return plt


def plot_report(obj, path):
    """Grouped bars: clean, each attack and IW-WC accuracy per row."""
    plt = _pyplot()
    table = as_table(obj)
    cols = ["clean"] + attack_columns(table) + ["iwwc"]
    fig, ax = plt.subplots(figsize=(max(6, 0.9 * len(cols) * len(table)), 3.5))
    width = 0.8 / len(table)
    for i, (label, r) in enumerate(table):
        vals = [r.clean_acc] + [r.per_attack_acc.get(c, 0.0) for c in cols[1:-1]] + [r.iwwc_acc or 0.0]
        ax.bar([j + i * width for j in range(len(cols))], vals, width, label=label)
    ax.set_xticks([j + 0.4 - width / 2 for j in range(len(cols))])
    ax.set_xticklabels(["Clean"] + [column_label(c) for c in cols[1:-1]] + ["IW-WC"], rotation=30, ha="right")
    ax.set_ylabel("accuracy (%)")
    ax.legend(fontsize=8)
    _save(fig, path)


def plot_sweep(rows, axis: str, path):
    """Clean and robust accuracy against the swept value."""
    plt = _pyplot()
    ok = [r for r in rows if r.get("error") is None]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    xs = list(range(len(ok)))
    ax.plot(xs, [r["clean_acc"] for r in ok], "o-", label="clean")
    ax.plot(xs, [r["robust_acc"] for r in ok], "s-", label="robust")
    ax.set_xticks(xs)
    ax.set_xticklabels([str(r["value"]) for r in ok])
    ax.set_xlabel(axis)
    ax.set_ylabel("accuracy (%)")
    ax.legend()
    _save(fig, path)


def plot_activation_shift(report: ActivationShiftReport, path):
    """Bars of the relative activation change per neuron group and partition."""
    plt = _pyplot()
    groups = [("successful", "delta_y", "GT class"), ("successful", "delta_yhat", "adv. class"),
              ("successful", "delta_nonGT", "other classes"), ("successful", "delta_unimp", "unimportant"),
              ("unsuccessful", "delta_y", "GT class"), ("unsuccessful", "delta_remcls", "other classes"),
              ("unsuccessful", "delta_unimp", "unimportant")]
    labels, vals, colors = [], [], []
    for part, key, name in groups:
        p = getattr(report, part)
        v = None if p is None else getattr(p, key)
        if v is None:
            continue
        labels.append(f"{part[:5]}.\n{name}")
        vals.append(v)
        colors.append("tab:red" if part == "successful" else "tab:blue")
    fig, ax = plt.subplots(figsize=(7, 3.5))
    ax.bar(range(len(vals)), vals, color=colors)
    ax.axhline(0, color="k", lw=0.8)
    ax.set_xticks(range(len(vals)))
    ax.set_xticklabels(labels, fontsize=7)
    ax.set_ylabel("activation change (%)")
    _save(fig, path)


def plot_loss_surface(grid: dict, path, title: str = ""):
    """Heat-map of a ``loss_surface_grid`` result (rows: alpha, columns: beta)."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(4.5, 4))
    a, b = grid["alphas"], grid["betas"]
    im = ax.imshow(grid["losses"], origin="lower", extent=[b[0], b[-1], a[0], a[-1]], aspect="auto", cmap="viridis")
    fig.colorbar(im, ax=ax, label="loss")
    ax.set_xlabel("beta (orthogonal)")
    ax.set_ylabel("alpha (gradient sign)")
    if title:
        ax.set_title(title)
    _save(fig, path)


def _save(fig, path):
    buf = io.BytesIO()
    fig.tight_layout()
    fig.savefig(buf, format="png", dpi=100, metadata={"Software": None})
    atomic_write_bytes(path, buf.getvalue())
    import matplotlib.pyplot as plt
    plt.close(fig)


# -- dispatch ------------------------------------------------------------------------


def report_render(obj, fmt: str, path=None, **kwargs) -> str | None:
    """Render ``obj`` in ``fmt``; writes to ``path`` when given and returns the text (None for plots)."""
    if fmt not in FORMATS:
        raise RenderError(f"unknown format {fmt!r}; choose from {FORMATS}")
    if fmt == "plot":
        if path is None:
            raise RenderError("plot output needs a path")
        plot_report(obj, path)
        return None
    text = {"csv": render_csv, "json": render_json, "markdown": render_markdown}[fmt](obj, **kwargs)
    if path is not None:
        atomic_write_text(Path(path), text)
    return text
