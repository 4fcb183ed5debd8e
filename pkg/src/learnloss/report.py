"""Static SVG reports for a finished run directory.

Plots are written by hand rather than through a plotting library so that
each drawn point carries its exact value in ``data-*`` attributes, which
keeps the figures checkable against ``summary.csv``.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from learnloss.acquisition import LEARNED_LOSS, LEARNED_LOSS_MSE
from learnloss.alsim import (
    SUMMARY_METRICS,
    losses_path,
    read_losses_csv,
    read_trial_csv,
    summarize,
    trial_path,
    write_summary_csv,
)

WIDTH, HEIGHT = 720, 440
MARGIN = dict(left=70, right=170, top=40, bottom=55)
PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"]
METRIC_LABELS = {
    "test_metric": "test metric",
    "ranking_accuracy": "ranking accuracy",
    "pearson": "Pearson(predicted loss, real loss)",
}


class ReportError(RuntimeError):
    pass


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / n
    step = 10 ** math.floor(math.log10(raw))
    for m in (1, 2, 5, 10):
        if raw <= m * step:
            step *= m
            break
    start = math.ceil(lo / step) * step
    return [start + i * step for i in range(int((hi - start) / step + 1e-9) + 1)]


class _Axes:
    def __init__(self, xlo, xhi, ylo, yhi, box=None):
        if xhi == xlo:
            xlo, xhi = xlo - 1, xhi + 1
        if yhi == ylo:
            ylo, yhi = ylo - 0.5, yhi + 0.5
        pad = 0.05 * (yhi - ylo)
        self.xlo, self.xhi, self.ylo, self.yhi = xlo, xhi, ylo - pad, yhi + pad
        self.x0, self.y0, self.x1, self.y1 = box or (
            MARGIN["left"], MARGIN["top"], WIDTH - MARGIN["right"], HEIGHT - MARGIN["bottom"]
        )

    def px(self, x: float) -> float:
        return self.x0 + (x - self.xlo) / (self.xhi - self.xlo) * (self.x1 - self.x0)

    def py(self, y: float) -> float:
        return self.y1 - (y - self.ylo) / (self.yhi - self.ylo) * (self.y1 - self.y0)

    def frame(self, xlabel: str, ylabel: str) -> list[str]:
        out = [f'<rect x="{self.x0}" y="{self.y0}" width="{self.x1 - self.x0}" '
               f'height="{self.y1 - self.y0}" fill="none" stroke="#333"/>']
        for t in _ticks(self.xlo, self.xhi):
            x = self.px(t)
            out.append(f'<line x1="{x:.2f}" y1="{self.y1}" x2="{x:.2f}" y2="{self.y1 + 5}" stroke="#333"/>')
            out.append(f'<text x="{x:.2f}" y="{self.y1 + 18}" text-anchor="middle" '
                       f'font-size="11">{t:g}</text>')
        for t in _ticks(self.ylo, self.yhi):
            y = self.py(t)
            out.append(f'<line x1="{self.x0 - 5}" y1="{y:.2f}" x2="{self.x0}" y2="{y:.2f}" stroke="#333"/>')
            out.append(f'<text x="{self.x0 - 8}" y="{y + 4:.2f}" text-anchor="end" '
                       f'font-size="11">{t:.3g}</text>')
        cx = (self.x0 + self.x1) / 2
        cy = (self.y0 + self.y1) / 2
        out.append(f'<text x="{cx}" y="{self.y1 + 40}" text-anchor="middle" '
                   f'font-size="13">{escape(xlabel)}</text>')
        out.append(f'<text x="{self.x0 - 50}" y="{cy}" text-anchor="middle" font-size="13" '
                   f'transform="rotate(-90 {self.x0 - 50} {cy})">{escape(ylabel)}</text>')
        return out


def _document(title: str, body: list[str], height: int = HEIGHT) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" '
            f'viewBox="0 0 {WIDTH} {height}" font-family="sans-serif">')
    return "\n".join([head, f'<title>{escape(title)}</title>',
                      f'<text x="{WIDTH / 2}" y="24" text-anchor="middle" font-size="15">'
                      f'{escape(title)}</text>', *body, "</svg>", ""])


def learning_curve_svg(rows: list[dict], metric: str, strategies: list[str], ylabel: str) -> str:
    """Mean curve with a +/-1 std band per strategy, x = labeled samples."""
    rows = [r for r in rows if r["metric"] == metric]
    finite = [r for r in rows if math.isfinite(r["mean"])]
    if finite:
        xs = [r["labeled_size"] for r in finite]
        lo = min(r["mean"] - (r["std"] if math.isfinite(r["std"]) else 0) for r in finite)
        hi = max(r["mean"] + (r["std"] if math.isfinite(r["std"]) else 0) for r in finite)
        ax = _Axes(min(xs), max(xs), lo, hi)
    else:
        ax = _Axes(0, 1, 0, 1)
    body = ax.frame("number of labeled samples", ylabel)
    for i, s in enumerate(strategies):
        color = PALETTE[i % len(PALETTE)]
        pts = sorted((r for r in finite if r["strategy"] == s), key=lambda r: r["stage"])
        group = [f'<g class="strategy" data-strategy="{escape(s)}">']
        if pts:
            upper = [(ax.px(r["labeled_size"]), ax.py(r["mean"] + r["std"])) for r in pts]
            lower = [(ax.px(r["labeled_size"]), ax.py(r["mean"] - r["std"])) for r in reversed(pts)]
            poly = " ".join(f"{x:.2f},{y:.2f}" for x, y in upper + lower)
            group.append(f'<polygon class="band" points="{poly}" fill="{color}" '
                         f'fill-opacity="0.18" stroke="none"/>')
            line = " ".join(f"{ax.px(r['labeled_size']):.2f},{ax.py(r['mean']):.2f}" for r in pts)
            group.append(f'<polyline points="{line}" fill="none" stroke="{color}" stroke-width="2"/>')
        for r in pts:
            group.append(
                f'<circle class="point" cx="{ax.px(r["labeled_size"]):.2f}" '
                f'cy="{ax.py(r["mean"]):.2f}" r="3" fill="{color}" '
                f'data-strategy="{escape(s)}" data-stage="{r["stage"]}" '
                f'data-labeled-size="{r["labeled_size"]}" data-metric="{metric}" '
                f'data-mean="{r["mean"]!r}" data-std="{r["std"]!r}"/>'
            )
        group.append("</g>")
        body.extend(group)
        ly = MARGIN["top"] + 18 + 20 * i
        lx = WIDTH - MARGIN["right"] + 15
        body.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 22}" y2="{ly}" stroke="{color}" stroke-width="3"/>')
        body.append(f'<text class="legend" x="{lx + 28}" y="{ly + 4}" font-size="12">{escape(s)}</text>')
    return _document(f"{ylabel} vs labeled samples", body)


def _scatter_panel(ax: _Axes, score, real, label: str, top_frac: float = 0.2) -> list[str]:
    body = ax.frame(label, "real loss")
    n = len(score)
    k = max(1, int(round(top_frac * n)))
    top = np.zeros(n, dtype=bool)
    top[np.lexsort((np.arange(n), -np.asarray(score)))[:k]] = True
    for i in range(n):
        color = "#1f77b4" if top[i] else "#bbbbbb"
        body.append(f'<circle cx="{ax.px(score[i]):.2f}" cy="{ax.py(real[i]):.2f}" r="1.8" '
                    f'fill="{color}" fill-opacity="0.7"/>')
    return body


def loss_scatter_svg(losses: dict[str, np.ndarray], title: str, stats: dict[str, float]) -> str:
    """Predicted loss (and entropy, if present) against real loss."""
    panels = [("predicted", "predicted loss")]
    if "entropy" in losses:
        panels.append(("entropy", "entropy"))
    panel_h = 300
    height = 40 + panel_h * len(panels) + 20
    real = losses["real"]
    body = []
    for i, (key, label) in enumerate(panels):
        score = losses[key]
        top = 40 + i * panel_h
        ax = _Axes(float(np.min(score)), float(np.max(score)), float(np.min(real)),
                   float(np.max(real)), box=(MARGIN["left"], top + 10, WIDTH - MARGIN["right"],
                                             top + panel_h - 55))
        body.extend(_scatter_panel(ax, score, real, label))
        r = stats.get(key, float("nan"))
        body.append(f'<text class="corr" x="{WIDTH - MARGIN["right"] + 15}" y="{top + 40}" '
                    f'font-size="12" data-panel="{key}" data-pearson="{r!r}">r = {r:.3f}</text>')
    return _document(title, body, height)


def load_run(run_dir: str | Path) -> tuple[dict, dict[str, list[list]]]:
    run_dir = Path(run_dir)
    manifest_path = run_dir / "manifest.json"
    if not manifest_path.exists():
        raise ReportError(f"{run_dir} has no manifest.json")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("status") != "complete":
        raise ReportError(f"run in {run_dir} is not complete")
    cfg = manifest["config"]
    records = {}
    for s in cfg["strategies"]:
        trials = []
        for t in range(cfg["active"]["trials"]):
            p = trial_path(run_dir, s, t)
            if not p.exists():
                raise ReportError(f"missing trial record {p}")
            trials.append(read_trial_csv(p))
        records[s] = trials
    return manifest, records


def cmd_report(run_dir: str | Path) -> list[Path]:
    """Regenerate summary.csv and write the SVG figures into ``run_dir``."""
    from learnloss.alsim import pearson

    run_dir = Path(run_dir)
    manifest, records = load_run(run_dir)
    strategies = manifest["config"]["strategies"]
    rows = summarize(records)
    write_summary_csv(run_dir / "summary.csv", rows)
    written = [run_dir / "summary.csv"]
    task_metric = "accuracy" if manifest["task"] == "classification" else "mean test loss"
    for metric in SUMMARY_METRICS:
        label = task_metric if metric == "test_metric" else METRIC_LABELS[metric]
        p = run_dir / f"{metric}.svg"
        p.write_text(learning_curve_svg(rows, metric, strategies, label))
        written.append(p)

    learned = [s for s in strategies if s in (LEARNED_LOSS, LEARNED_LOSS_MSE)]
    chosen = learned[0] if learned else strategies[0]
    lp = losses_path(run_dir, chosen, 0)
    if not lp.exists():
        raise ReportError(f"missing final-stage losses {lp}")
    losses = read_losses_csv(lp)
    stats = {}
    for key in ("predicted", "entropy"):
        if key in losses:
            try:
                stats[key] = pearson(losses[key], losses["real"])
            except ValueError:
                stats[key] = float("nan")
    p = run_dir / "loss_scatter.svg"
    p.write_text(loss_scatter_svg(losses, f"final stage, {chosen}, trial 0", stats))
    written.append(p)
    return written
