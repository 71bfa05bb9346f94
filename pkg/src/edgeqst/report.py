"""CSV and standalone SVG output for fidelity sweeps, latency stats and reconstructions."""

from __future__ import annotations

import csv
import io
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from edgeqst.bench import BenchStats
from edgeqst.pipeline import FidelityReport

BENCH_COLUMNS = ["engine", "n", "mean_ms", "median_ms", "p95_ms", "std_ms", "total_s"]
FIDELITY_COLUMNS = ["bin_lo_db", "bin_hi_db", "count", "mean_fidelity", "std_fidelity"]
EXAMPLE_COLUMNS = ["index", "true_r", "true_theta", "true_nbar", "est_r", "est_theta", "est_nbar", "fidelity"]


def _num(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _table(columns, rows) -> str:
    buf = io.StringIO(newline="")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([c if isinstance(c, str) else _num(c) for c in row])
    return buf.getvalue()


def bench_csv(stats) -> str:
    if isinstance(stats, BenchStats):
        stats = [stats]
    return _table(BENCH_COLUMNS, [
        (s.engine, s.n, s.mean_ms, s.median_ms, s.p95_ms, s.std_ms, s.total_s) for s in stats
    ])


def fidelity_csv(report: FidelityReport) -> str:
    """Empty bins are written with count 0 and blank mean/std."""
    return _table(FIDELITY_COLUMNS, [
        (b.lo_db, b.hi_db, b.count, b.mean, b.std) for b in report.bins
    ])


def examples_csv(report: FidelityReport) -> str:
    return _table(EXAMPLE_COLUMNS, [
        (i, t.r, t.theta, t.nbar, e.r, e.theta, e.nbar, f)
        for i, (t, e, f) in enumerate(zip(report.true, report.estimated, report.fidelity))
    ])


def wigner_csv(xs, ps, w) -> str:
    rows = [(float(xs[j]), float(ps[i]), float(w[i, j]))
            for i in range(len(ps)) for j in range(len(xs))]
    return _table(["x", "p", "w"], rows)


def density_csv(rho) -> str:
    dim = rho.shape[0]
    rows = [(m, n, float(rho[m, n].real), float(rho[m, n].imag))
            for m in range(dim) for n in range(dim)]
    return _table(["m", "n", "re", "im"], rows)


def emit_csv(obj, path) -> None:
    """Write a FidelityReport or BenchStats (or a list of them) as CSV."""
    if isinstance(obj, FidelityReport):
        text = fidelity_csv(obj)
    elif isinstance(obj, BenchStats) or (isinstance(obj, list) and all(isinstance(s, BenchStats) for s in obj)):
        text = bench_csv(obj)
    else:
        raise TypeError(f"cannot emit {type(obj).__name__} as CSV")
    _write(path, text)


def _write(path, text: str) -> None:
    path = Path(path)
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


def read_fidelity_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or list(rows[0].keys()) != FIDELITY_COLUMNS:
        raise ValueError(f"{path}: not a fidelity report CSV")
    return rows


def read_bench_csv(path) -> list[BenchStats]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != BENCH_COLUMNS:
            raise ValueError(f"{path}: not a bench CSV")
        return [BenchStats(r["engine"], int(r["n"]), float(r["mean_ms"]), float(r["median_ms"]),
                           float(r["p95_ms"]), float(r["std_ms"]), float(r["total_s"]))
                for r in reader]


# ---------------------------------------------------------------- SVG

W, H = 640, 420
LEFT, RIGHT, TOP, BOTTOM = 70, 20, 40, 60
COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"]


def _f(v: float) -> str:
    return f"{v:.2f}"


def _svg(body: list[str], title: str, stamp: str | None) -> str:
    head = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
    ]
    if stamp:
        head.append(f"<!-- generated {escape(stamp)} -->")
    head += [
        f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2}" y="22" text-anchor="middle" font-family="sans-serif" font-size="15">{escape(title)}</text>',
    ]
    return "\n".join(head + body + ["</svg>"]) + "\n"


def _axes(xlabel, ylabel, xticks, yticks, sx, sy) -> list[str]:
    x0, x1, y0, y1 = LEFT, W - RIGHT, H - BOTTOM, TOP
    out = [
        '<g id="axes" stroke="black" stroke-width="1">',
        f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}"/>',
        f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}"/>',
        "</g>",
        '<g font-family="sans-serif" font-size="11">',
    ]
    for v, label in xticks:
        px = _f(sx(v))
        out.append(f'<line x1="{px}" y1="{y0}" x2="{px}" y2="{y0 + 4}" stroke="black"/>')
        out.append(f'<text x="{px}" y="{y0 + 17}" text-anchor="middle">{escape(label)}</text>')
    for v in yticks:
        py = _f(sy(v))
        out.append(f'<line x1="{x0 - 4}" y1="{py}" x2="{x0}" y2="{py}" stroke="black"/>')
        out.append(f'<text x="{x0 - 7}" y="{py}" text-anchor="end" dominant-baseline="middle">{v:.3g}</text>')
    out.append(f'<text x="{(x0 + x1) / 2}" y="{H - 18}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="18" y="{(y0 + y1) / 2}" text-anchor="middle" '
               f'transform="rotate(-90 18 {(y0 + y1) / 2})">{escape(ylabel)}</text>')
    out.append("</g>")
    return out


def fidelity_svg(series: list[tuple[str, list]], stamp: str | None = None) -> str:
    """One polyline (bin means) and one shaded +-std band per series.

    ``series`` holds (label, bins) where bins are (lo, hi, count, mean, std)
    tuples; empty bins are skipped.
    """
    pts_all = [[b for b in bins if b[2] > 0 and b[3] is not None] for _, bins in series]
    if not any(pts_all):
        raise ValueError("no fidelity data to plot")
    xmax = max(b[1] for _, bins in series for b in bins)
    lows = [b[3] - b[4] for pts in pts_all for b in pts]
    ymin = max(0.0, np.floor(min(lows) * 50) / 50)
    ymin = min(ymin, 0.98)
    sx = lambda v: LEFT + (W - LEFT - RIGHT) * v / xmax
    sy = lambda v: (H - BOTTOM) - (H - BOTTOM - TOP) * (v - ymin) / (1.0 - ymin)
    nt = 5
    yticks = [ymin + (1.0 - ymin) * k / nt for k in range(nt + 1)]
    xticks = [(v, f"{v:g}") for v in np.linspace(0, xmax, 6)]
    body = _axes("squeezing level (dB)", "mean fidelity", xticks, yticks, sx, sy)
    for k, ((label, _), pts) in enumerate(zip(series, pts_all)):
        if not pts:
            continue
        color = COLORS[k % len(COLORS)]
        xc = [0.5 * (b[0] + b[1]) for b in pts]
        upper = [min(b[3] + b[4], 1.0) for b in pts]
        lower = [max(b[3] - b[4], ymin) for b in pts]
        d = "M " + " L ".join(f"{_f(sx(x))},{_f(sy(y))}" for x, y in zip(xc, upper))
        d += " L " + " L ".join(f"{_f(sx(x))},{_f(sy(y))}" for x, y in zip(reversed(xc), reversed(lower))) + " Z"
        body.append(f'<path class="band" d="{d}" fill="{color}" fill-opacity="0.2" stroke="none"/>')
        line = " ".join(f"{_f(sx(x))},{_f(sy(b[3]))}" for x, b in zip(xc, pts))
        body.append(f'<polyline class="mean" points="{line}" fill="none" stroke="{color}" stroke-width="2"/>')
        ly = TOP + 10 + 18 * k
        body.append(f'<g class="legend"><line x1="{W - 170}" y1="{ly}" x2="{W - 145}" y2="{ly}" '
                    f'stroke="{color}" stroke-width="2"/><text x="{W - 140}" y="{ly + 4}" '
                    f'font-family="sans-serif" font-size="11">{escape(label)}</text></g>')
    return _svg(body, "Mean fidelity vs squeezing level", stamp)


def latency_svg(stats: list[BenchStats], stamp: str | None = None) -> str:
    if not stats:
        raise ValueError("no latency data to plot")
    ymax = max(s.mean_ms for s in stats) * 1.2 or 1.0
    n = len(stats)
    slot = (W - LEFT - RIGHT) / n
    sx = lambda v: LEFT + slot * (v + 0.5)
    sy = lambda v: (H - BOTTOM) - (H - BOTTOM - TOP) * v / ymax
    xticks = [(k, s.engine) for k, s in enumerate(stats)]
    yticks = [ymax * k / 5 for k in range(6)]
    body = _axes("engine", "mean latency per inference (ms)", xticks, yticks, sx, sy)
    bw = slot * 0.5
    for k, s in enumerate(stats):
        color = COLORS[k % len(COLORS)]
        x = sx(k) - bw / 2
        y = sy(s.mean_ms)
        body.append(f'<rect class="bar" x="{_f(x)}" y="{_f(y)}" width="{_f(bw)}" '
                    f'height="{_f(H - BOTTOM - y)}" fill="{color}"/>')
        body.append(f'<text class="value" x="{_f(sx(k))}" y="{_f(y - 5)}" text-anchor="middle" '
                    f'font-family="sans-serif" font-size="11">{s.mean_ms:.3f} ms</text>')
        ly = TOP + 10 + 18 * k
        body.append(f'<g class="legend"><rect x="{W - 170}" y="{ly - 6}" width="12" height="12" '
                    f'fill="{color}"/><text x="{W - 152}" y="{ly + 4}" font-family="sans-serif" '
                    f'font-size="11">{escape(s.engine)} (n={s.n})</text></g>')
    return _svg(body, "Mean inference latency", stamp)


def emit_svg(obj, path, plot_kind: str | None = None, stamp: str | None = None) -> None:
    """Write a fidelity sweep (FidelityReport or list of (label, report)) or
    latency stats (BenchStats list) as SVG."""
    if plot_kind is None:
        plot_kind = "latency" if isinstance(obj, BenchStats) or (
            isinstance(obj, list) and obj and isinstance(obj[0], BenchStats)) else "fidelity"
    if plot_kind == "fidelity":
        if isinstance(obj, FidelityReport):
            obj = [("engine", obj)]
        series = [(label, [(b.lo_db, b.hi_db, b.count, b.mean, b.std) for b in r.bins])
                  if isinstance(r, FidelityReport) else (label, r) for label, r in obj]
        text = fidelity_svg(series, stamp)
    elif plot_kind == "latency":
        text = latency_svg([obj] if isinstance(obj, BenchStats) else list(obj), stamp)
    else:
        raise ValueError(f"unknown plot kind {plot_kind!r}")
    _write(path, text)
