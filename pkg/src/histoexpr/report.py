"""Summary tables and SVG figures written straight from the stage artifacts."""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Callable, Sequence
from xml.sax.saxutils import escape

import numpy as np

from .stats import TranscriptEvaluation, read_ledger


class ReportError(ValueError):
    pass


def gate_counts(ledger: Sequence[TranscriptEvaluation]) -> dict[str, int]:
    if not ledger:
        raise ReportError("empty ledger")
    return {
        "evaluated": len(ledger),
        "cv_pass": sum(e.significant_cv for e in ledger),
        "test_pass": sum(e.validated_test for e in ledger),
    }


# ---------------------------------------------------------------- svg helpers

class Svg:
    def __init__(self, width: int, height: int):
        self.width, self.height = width, height
        self.parts: list[str] = []

    def line(self, x1, y1, x2, y2, stroke="#333", width=1.0):
        self.parts.append(f'<line x1="{x1:.2f}" y1="{y1:.2f}" x2="{x2:.2f}" y2="{y2:.2f}" '
                          f'stroke="{stroke}" stroke-width="{width}"/>')

    def rect(self, x, y, w, h, fill="#9ecae1", stroke="#333"):
        self.parts.append(f'<rect x="{x:.2f}" y="{y:.2f}" width="{max(w, 0):.2f}" height="{max(h, 0):.2f}" '
                          f'fill="{fill}" stroke="{stroke}"/>')

    def circle(self, cx, cy, r=3.0, fill="#d62728"):
        self.parts.append(f'<circle cx="{cx:.2f}" cy="{cy:.2f}" r="{r}" fill="{fill}"/>')

    def text(self, x, y, s, size=11, anchor="middle"):
        self.parts.append(f'<text x="{x:.2f}" y="{y:.2f}" font-size="{size}" font-family="sans-serif" '
                          f'text-anchor="{anchor}">{escape(str(s))}</text>')

    def render(self) -> str:
        head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.width}" height="{self.height}" '
                f'viewBox="0 0 {self.width} {self.height}">')
        return "\n".join([head, '<rect width="100%" height="100%" fill="white"/>', *self.parts, "</svg>"]) + "\n"


def _axis(svg: Svg, lo: float, hi: float, x0: float, y0: float, y1: float, ticks: int = 5,
          fmt: str = "{:.2f}") -> Callable[[float], float]:
    """Vertical axis from y0 (value lo) up to y1 (value hi); returns the value-to-y map."""
    span = hi - lo if hi > lo else 1.0

    def ymap(v: float) -> float:
        return y0 - (v - lo) / span * (y0 - y1)

    svg.line(x0, y0, x0, y1)
    for i in range(ticks + 1):
        v = lo + span * i / ticks
        y = ymap(v)
        svg.line(x0 - 4, y, x0, y)
        svg.text(x0 - 6, y + 4, fmt.format(v), size=10, anchor="end")
    return ymap


def boxplot_svg(values: Sequence[float], title: str, lo: float = -1.0, hi: float = 1.0) -> str:
    v = np.asarray([x for x in values if not math.isnan(x)], dtype=float)
    svg = Svg(260, 320)
    svg.text(130, 20, title, size=13)
    ymap = _axis(svg, lo, hi, 60, 290, 40)
    svg.line(60, ymap(0.0), 240, ymap(0.0), stroke="#bbb")
    if v.size:
        q1, med, q3 = np.quantile(v, [0.25, 0.5, 0.75])
        iqr = q3 - q1
        wl = v[v >= q1 - 1.5 * iqr].min()
        wh = v[v <= q3 + 1.5 * iqr].max()
        svg.line(150, ymap(wl), 150, ymap(q1))
        svg.line(150, ymap(q3), 150, ymap(wh))
        svg.line(130, ymap(wl), 170, ymap(wl))
        svg.line(130, ymap(wh), 170, ymap(wh))
        svg.rect(110, ymap(q3), 80, ymap(q1) - ymap(q3))
        svg.line(110, ymap(med), 190, ymap(med), stroke="#08519c", width=2)
        for x in v[(v < wl) | (v > wh)]:
            svg.circle(150, ymap(x), 2.0, fill="#555")
    svg.text(150, 310, f"n = {v.size}", size=10)
    return svg.render()


def cluster_chart_svg(sizes: Sequence[int], within: Sequence[float | None]) -> str:
    k = len(sizes)
    bar = max(4.0, min(24.0, 560.0 / max(k, 1)))
    width = int(100 + bar * k + 40)
    svg = Svg(width, 340)
    svg.text(width / 2, 20, "Cluster size (bars) and within-cluster mean |rho| (dots)", size=12)
    smax = max(max(sizes), 1)
    ymap = _axis(svg, 0, smax, 60, 300, 40, fmt="{:.0f}")
    rmap_x = 60 + bar * k + 10
    svg.line(rmap_x, 300, rmap_x, 40)
    for i in range(6):
        y = 300 - i / 5 * 260
        svg.line(rmap_x, y, rmap_x + 4, y)
        svg.text(rmap_x + 6, y + 4, f"{i / 5:.1f}", size=10, anchor="start")
    for i, (s, r) in enumerate(zip(sizes, within)):
        x = 60 + i * bar
        svg.rect(x + 1, ymap(s), bar - 2, 300 - ymap(s))
        if r is not None and not math.isnan(r):
            svg.circle(x + bar / 2, 300 - r * 260, 3.0)
        if k <= 30:
            svg.text(x + bar / 2, 315, i + 1, size=9)
    return svg.render()


def ci_plot_svg(rows: Sequence[tuple[str, float, float, float]], title: str, log_scale: bool = False,
                reference: float | None = None) -> str:
    """Dot with horizontal interval per row: (label, estimate, low, high)."""
    height = 60 + 28 * max(len(rows), 1)
    svg = Svg(480, height)
    svg.text(240, 20, title, size=13)
    if not rows:
        svg.text(240, 50, "no estimates", size=11)
        return svg.render()

    def tf(v):
        return math.log(v) if log_scale else v

    vals = [tf(v) for _, e, lo, hi in rows for v in (e, lo, hi) if v > 0 or not log_scale]
    if reference is not None:
        vals.append(tf(reference))
    lo_v, hi_v = min(vals), max(vals)
    pad = (hi_v - lo_v) * 0.1 or 0.5
    lo_v, hi_v = lo_v - pad, hi_v + pad

    def xmap(v):
        return 160 + (tf(v) - lo_v) / (hi_v - lo_v) * 290

    base = height - 25
    svg.line(160, base, 450, base)
    for i in range(5):
        v = lo_v + (hi_v - lo_v) * i / 4
        x = 160 + i / 4 * 290
        svg.line(x, base, x, base + 4)
        svg.text(x, base + 16, f"{math.exp(v) if log_scale else v:.2f}", size=10)
    if reference is not None:
        svg.line(xmap(reference), 35, xmap(reference), base, stroke="#bbb")
    for i, (label, est, lo, hi) in enumerate(rows):
        y = 45 + 28 * i
        svg.text(150, y + 4, label, size=11, anchor="end")
        svg.line(xmap(lo), y, xmap(hi), y, width=1.5)
        svg.circle(xmap(est), y, 4.0)
    return svg.render()


# ---------------------------------------------------------------- report

def _read_tsv(path: Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh, delimiter="\t"))


def _write_tsv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fnum(s: str) -> float:
    return math.nan if s == "" else float(s)


def emit_report(ledger_path: Path, modes_path: Path, cluster_stats_path: Path, cox_path: Path,
                ccp_summary_path: Path, gsea_path: Path, cv_alpha: float, test_alpha: float,
                output: Callable[[str], Path]) -> None:
    """Write gate/mode/cluster tables and the figures through ``output(relative_name)``."""
    ledger = read_ledger(ledger_path)
    gates = gate_counts(ledger)
    _write_tsv(output("gates.tsv"), ["gate", "count"], [[g, n] for g, n in gates.items()])

    modes: dict[str, list[tuple[float, float]]] = {}
    for r in _read_tsv(modes_path):
        modes.setdefault(r["mode"], []).append((_fnum(r["rho_cv"]), float(r["p_adj_cv"])))
    mode_rows = []
    for mode, vals in modes.items():
        rho = np.array([v for v, _ in vals])
        ok = rho[~np.isnan(rho)]
        mode_rows.append([mode, len(vals), repr(float(np.median(ok))) if ok.size else "",
                          sum(q < cv_alpha for _, q in vals)])
        with open(output(f"boxplot_{mode}.svg"), "w") as fh:
            fh.write(boxplot_svg(rho, f"{mode}: held-out rho"))
    _write_tsv(output("modes.tsv"), ["mode", "n_transcripts", "median_rho_cv", "n_cv_pass"], mode_rows)

    stats = _read_tsv(cluster_stats_path)
    sizes = [int(r["size"]) for r in stats]
    within = [None if r["within_mean_abs_rho"] == "" else float(r["within_mean_abs_rho"]) for r in stats]
    _write_tsv(output("clusters.tsv"), ["cluster", "size", "within_mean_abs_rho", "between_mean_abs_rho"],
               [[r["cluster"], r["size"], r["within_mean_abs_rho"], r["between_mean_abs_rho"]] for r in stats])
    with open(output("clusters.svg"), "w") as fh:
        fh.write(cluster_chart_svg(sizes, within))

    with open(ccp_summary_path) as fh:
        ccp = json.load(fh)
    cox = _read_tsv(cox_path)
    with open(output("ci_ccp.svg"), "w") as fh:
        fh.write(ci_plot_svg([("signature rho", ccp["rho"], ccp["ci_low"], ccp["ci_high"])],
                             "Predicted vs measured signature score (bootstrap 95% CI)", reference=0.0))
    with open(output("ci_cox.svg"), "w") as fh:
        fh.write(ci_plot_svg([(r["name"], float(r["hazard_ratio"]), float(r["ci_low"]), float(r["ci_high"]))
                              for r in cox], "Hazard ratios (Wald 95% CI)", log_scale=True, reference=1.0))

    gsea = _read_tsv(gsea_path)
    _write_tsv(output("gsea_significant.tsv"), ["set_id", "size", "es", "p", "p_adj"],
               [[r["set_id"], r["size"], r["es"], r["p"], r["p_adj"]] for r in gsea
                if float(r["p_adj"]) < 0.05])
    summary = {"gates": gates, "cv_alpha": cv_alpha, "test_alpha": test_alpha,
               "signature_rho": ccp["rho"], "n_gsea_sets": len(gsea),
               "n_gsea_significant": sum(float(r["p_adj"]) < 0.05 for r in gsea)}
    with open(output("summary.json"), "w") as fh:
        json.dump(summary, fh, sort_keys=True, indent=1)
        fh.write("\n")
