"""Static report over a lab directory: SVG curves, coordinate-check panels and
a markdown summary table.

Output depends only on the files on disk. Runs and series are sorted, and
every number is printed at fixed precision, so regenerating a report over
the same artifacts yields identical bytes.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from xml.sax.saxutils import escape

from .experiments import _json_restore
from .metrics import CoordCheckResult, default_sigma, gaussian_smooth
from .train import read_metrics

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
           "#7f7f7f", "#bcbd22"]
W, H = 800, 400
PAD_L, PAD_R, PAD_T, PAD_B = 70, 300, 36, 50


@dataclass
class RunView:
    run_id: str
    label: str
    status: str
    spec: dict
    summary: dict
    records: list

    @property
    def width(self):
        return self.spec["model_cfg"]["d_model"]

    @property
    def scheme(self):
        return self.spec["scheme"]["name"]

    @property
    def lambda_shrink(self):
        ws = self.spec.get("warmstart")
        return None if ws is None else ws["lambda_shrink"]

    def name(self):
        return self.label or f"{self.scheme} d={self.width}"


@dataclass
class Report:
    index: str
    present: list
    absent: list
    files: list = field(default_factory=list)


def collect_runs(out_dir, run_ids=None):
    """Load finished runs under ``out_dir/runs``; requested ids that are missing come back as absent."""
    root = os.path.join(out_dir, "runs")
    on_disk = sorted(os.listdir(root)) if os.path.isdir(root) else []
    wanted = on_disk if run_ids is None else sorted(set(run_ids))
    present, absent = [], []
    for rid in wanted:
        path = os.path.join(root, rid)
        res_path = os.path.join(path, "result.json")
        if not os.path.exists(res_path):
            absent.append(rid)
            continue
        with open(res_path) as f:
            res = _json_restore(json.load(f))
        mpath = os.path.join(path, "metrics.jsonl")
        records = read_metrics(mpath) if os.path.exists(mpath) else []
        present.append(RunView(rid, res.get("label", ""), res["status"], res["spec"], res["summary"], records))
    present.sort(key=lambda r: (r.name(), r.run_id))
    return present, absent


def collect_coordchecks(out_dir):
    root = os.path.join(out_dir, "coordcheck")
    if not os.path.isdir(root):
        return []
    out = []
    for fn in sorted(os.listdir(root)):
        if fn.endswith(".json"):
            with open(os.path.join(root, fn)) as f:
                out.append((fn[:-5], CoordCheckResult.from_dict(json.load(f))))
    return out


def smoothed_curve(records, key):
    """(x, smoothed val loss) over the records with a finite validation loss."""
    pts = [(r[key], r["val_loss"]) for r in records if r.get("val_loss") is not None
           and math.isfinite(r["val_loss"])]
    if not pts:
        return [], []
    xs = [p[0] for p in pts]
    ys = gaussian_smooth([p[1] for p in pts], default_sigma(len(pts))).smoothed
    return xs, ys


# ---------------------------------------------------------------- svg


def _num(x):
    return f"{x:.2f}"


def _nice_ticks(lo, hi, n=5):
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=10 * mag)
    first = math.ceil(lo / step) * step
    ticks = []
    t = first
    while t <= hi + 1e-12 * abs(hi):
        ticks.append(t)
        t += step
    return ticks


def _log_ticks(lo, hi):
    decades = range(math.floor(math.log10(lo)), math.ceil(math.log10(hi)) + 1)
    for mantissas in ((1,), (1, 2, 5), (1, 1.5, 2, 3, 5, 7)):
        ticks = [m * 10.0**k for k in decades for m in mantissas if lo <= m * 10.0**k <= hi * (1 + 1e-9)]
        if len(ticks) >= 3:
            return ticks
    return ticks or [lo]


def _fmt_tick(v):
    if v == 0:
        return "0"
    a = abs(v)
    if a >= 1e4 or a < 1e-2:
        return f"{v:.0e}".replace("e+0", "e").replace("e-0", "e-").replace("e+", "e")
    return f"{v:.3g}"


class Axes:
    """Maps data coordinates into a pixel box; optional log axes."""

    def __init__(self, x0, y0, w, h, xr, yr, logx=False, logy=False):
        self.x0, self.y0, self.w, self.h = x0, y0, w, h
        self.logx, self.logy = logx, logy
        self.xr = self._range(xr, logx)
        self.yr = self._range(yr, logy)

    @staticmethod
    def _range(r, log):
        lo, hi = r
        if log:
            lo, hi = math.log10(lo), math.log10(hi)
        if hi - lo < 1e-12:
            lo, hi = lo - 0.5, hi + 0.5
        return lo, hi

    def px(self, x):
        v = math.log10(x) if self.logx else x
        return self.x0 + (v - self.xr[0]) / (self.xr[1] - self.xr[0]) * self.w

    def py(self, y):
        v = math.log10(y) if self.logy else y
        return self.y0 + self.h - (v - self.yr[0]) / (self.yr[1] - self.yr[0]) * self.h

    def frame(self, xlabel, ylabel, title, xticks=None):
        out = [f'<rect x="{_num(self.x0)}" y="{_num(self.y0)}" width="{_num(self.w)}" height="{_num(self.h)}" '
               'fill="none" stroke="#333"/>']
        lo = 10 ** self.xr[0] if self.logx else self.xr[0]
        hi = 10 ** self.xr[1] if self.logx else self.xr[1]
        if xticks is None:
            xticks = _log_ticks(lo, hi) if self.logx else _nice_ticks(lo, hi)
        for t in xticks:
            x = self.px(t)
            out.append(f'<line x1="{_num(x)}" y1="{_num(self.y0 + self.h)}" x2="{_num(x)}" '
                       f'y2="{_num(self.y0 + self.h + 4)}" stroke="#333"/>')
            out.append(f'<text x="{_num(x)}" y="{_num(self.y0 + self.h + 16)}" text-anchor="middle">'
                       f'{_fmt_tick(t)}</text>')
        lo = 10 ** self.yr[0] if self.logy else self.yr[0]
        hi = 10 ** self.yr[1] if self.logy else self.yr[1]
        for t in (_log_ticks(lo, hi) if self.logy else _nice_ticks(lo, hi)):
            y = self.py(t)
            out.append(f'<line x1="{_num(self.x0 - 4)}" y1="{_num(y)}" x2="{_num(self.x0)}" y2="{_num(y)}" '
                       'stroke="#333"/>')
            out.append(f'<text x="{_num(self.x0 - 6)}" y="{_num(y + 4)}" text-anchor="end">{_fmt_tick(t)}</text>')
        cx = self.x0 + self.w / 2
        out.append(f'<text x="{_num(cx)}" y="{_num(self.y0 + self.h + 34)}" text-anchor="middle">'
                   f'{escape(xlabel)}</text>')
        out.append(f'<text x="{_num(self.x0 - 50)}" y="{_num(self.y0 + self.h / 2)}" text-anchor="middle" '
                   f'transform="rotate(-90 {_num(self.x0 - 50)} {_num(self.y0 + self.h / 2)})">{escape(ylabel)}</text>')
        out.append(f'<text x="{_num(cx)}" y="{_num(self.y0 - 10)}" text-anchor="middle" font-weight="bold">'
                   f'{escape(title)}</text>')
        return out

    def polyline(self, xs, ys, color, dash=False):
        pts = " ".join(f"{_num(self.px(x))},{_num(self.py(y))}" for x, y in zip(xs, ys))
        extra = ' stroke-dasharray="4 3"' if dash else ""
        return f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"{extra}/>'


def _svg(width, height, body):
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">')
    return "\n".join([head, f'<rect width="{width}" height="{height}" fill="white"/>', *body, "</svg>", ""])


def _extent(values, log):
    vals = [v for v in values if math.isfinite(v) and (v > 0 or not log)]
    if not vals:
        return (1.0, 10.0) if log else (0.0, 1.0)
    return min(vals), max(vals)


def line_chart(series, xlabel, ylabel, title, logx=False, logy=False):
    """``series``: list of (name, xs, ys, dashed). Returns an SVG document."""
    xs_all = [x for _, xs, _, _ in series for x in xs]
    ys_all = [y for _, _, ys, _ in series for y in ys]
    ax = Axes(PAD_L, PAD_T, W - PAD_L - PAD_R, H - PAD_T - PAD_B, _extent(xs_all, logx), _extent(ys_all, logy),
              logx, logy)
    body = ax.frame(xlabel, ylabel, title)
    if not series:
        body.append(f'<text x="{_num(PAD_L + ax.w / 2)}" y="{_num(PAD_T + ax.h / 2)}" text-anchor="middle" '
                    'fill="#888">no runs</text>')
    for i, (name, xs, ys, dash) in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        if xs:
            body.append(ax.polyline(xs, ys, color, dash))
        ly = PAD_T + 12 + 14 * i
        lx = W - PAD_R + 10
        body.append(f'<line x1="{_num(lx)}" y1="{_num(ly - 4)}" x2="{_num(lx + 16)}" y2="{_num(ly - 4)}" '
                    f'stroke="{color}" stroke-width="2"/>')
        body.append(f'<text x="{_num(lx + 20)}" y="{_num(ly)}">{escape(name)}</text>')
    # the legend may outgrow the plot; the canvas grows with it
    return _svg(W, max(H, PAD_T + 14 * len(series) + 10), body)


def coordcheck_svg(name, cc):
    """One log-log panel per tapped layer: activation L1 against width, one line per step."""
    pw, ph, gap = 220, 200, 80
    total_w = gap + len(cc.layers) * (pw + gap)
    body = [f'<text x="{_num(total_w / 2)}" y="18" text-anchor="middle" font-weight="bold">'
            f'{escape(cc.label or name)}</text>']
    for j, layer in enumerate(cc.layers):
        curves = [(s, cc.norms[layer][s]) for s in cc.steps if all(v > 0 for v in cc.norms[layer][s])]
        ys = [v for _, vals in curves for v in vals]
        ax = Axes(gap + j * (pw + gap), 50, pw, ph, (min(cc.widths), max(cc.widths)), _extent(ys, True),
                  logx=True, logy=True)
        body.extend(ax.frame("width", "mean |activation|", layer, xticks=cc.widths))
        for s, vals in curves:
            body.append(ax.polyline(cc.widths, vals, PALETTE[s % len(PALETTE)]))
        for s in cc.steps:
            slope = cc.slopes[layer][s]
            txt = "nan" if not math.isfinite(slope) else f"{slope:+.2f}"
            body.append(f'<text x="{_num(ax.x0 + 4)}" y="{_num(ax.y0 + ph + 50 + 13 * s)}" '
                        f'fill="{PALETTE[s % len(PALETTE)]}">step {s}: slope {txt}</text>')
    return _svg(total_w, 50 + ph + 60 + 13 * (len(cc.steps) + 1), body)


# ---------------------------------------------------------------- assembly


def _series(runs, key, concat_base):
    by_id = {r.run_id: r for r in runs}
    out = []
    for r in runs:
        xs, ys = smoothed_curve(r.records, key)
        out.append((r.name(), xs, ys, r.lambda_shrink is not None))
        base = by_id.get(r.spec.get("base_run")) if concat_base else None
        if base is not None:
            # base learning curve followed by the warmstarted run, shifted by the base's spend
            bx, by = smoothed_curve(base.records, key)
            shift = base.summary[key]
            out.append((f"{r.name()} +base", bx + [x + shift for x in xs], by + ys, True))
    return out


def _cell(x, nd=4):
    if x is None:
        return "-"
    if isinstance(x, float):
        return "inf" if not math.isfinite(x) else f"{x:.{nd}f}"
    return str(x)


def summary_table(runs):
    head = "| run | label | scheme | width | lambda | status | initial val | final val | smoothed final | tokens | FLOPs |"
    lines = [head, "|" + "---|" * 11]
    for r in runs:
        s = r.summary
        lines.append(
            f"| {r.run_id} | {r.label} | {r.scheme} | {r.width} | {_cell(r.lambda_shrink, 2)} | {r.status} | "
            f"{_cell(s['initial_val'])} | {_cell(s['final_val'])} | {_cell(s['final_smoothed_val'])} | "
            f"{s['tokens']} | {s['flops']:.4e} |"
        )
    return "\n".join(lines)


def write_report(out_dir, run_ids=None, concat_base=False, dest=None):
    """Render ``out_dir`` into ``dest`` (default ``out_dir/report``)."""
    dest = dest or os.path.join(out_dir, "report")
    os.makedirs(dest, exist_ok=True)
    runs, absent = collect_runs(out_dir, run_ids)
    files = {}
    files["loss_vs_flops.svg"] = line_chart(_series(runs, "flops", concat_base), "training FLOPs (6ND)",
                                            "validation loss (smoothed)", "Loss against compute")
    files["loss_vs_tokens.svg"] = line_chart(_series(runs, "tokens", concat_base), "training tokens",
                                             "validation loss (smoothed)", "Loss against tokens")
    ccs = collect_coordchecks(out_dir)
    for name, cc in ccs:
        files[f"coordcheck_{name}.svg"] = coordcheck_svg(name, cc)

    md = ["# muwarm report", "", f"{len(runs)} runs, {len(absent)} absent.", "",
          "![loss against FLOPs](loss_vs_flops.svg)", "", "![loss against tokens](loss_vs_tokens.svg)", "",
          "## Runs", "", summary_table(runs), ""]
    if absent:
        md += ["## Absent runs", ""] + [f"- {rid}" for rid in absent] + [""]
    if ccs:
        md += ["## Coordinate checks", "", "| check | max abs slope (steps >= 1) | failures |", "|---|---|---|"]
        for name, cc in ccs:
            later = [s for s in cc.steps if s >= 1]
            worst = cc.max_abs_slope(later) if later else float("nan")
            md.append(f"| {name} | {_cell(worst, 3)} | {len(cc.failures)} |")
        md.append("")
        md += [f"![{name}](coordcheck_{name}.svg)" for name, _ in ccs] + [""]
    files["report.md"] = "\n".join(md)

    for fn, text in files.items():
        with open(os.path.join(dest, fn), "w", newline="\n") as f:
            f.write(text)
    return Report(os.path.join(dest, "report.md"), [r.run_id for r in runs], absent, sorted(files))
