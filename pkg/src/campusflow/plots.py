"""Static SVG charts: observed-vs-predicted scatter and per-epoch loss curves."""

import math
from xml.sax.saxutils import escape

WIDTH, HEIGHT = 480, 360
MARGIN = dict(left=60, right=20, top=36, bottom=48)
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _ticks(lo, hi, n=5):
    if hi <= lo:
        return [lo]
    step = 10 ** math.floor(math.log10((hi - lo) / n))
    for mult in (1, 2, 5, 10):
        if (hi - lo) / (step * mult) <= n:
            step *= mult
            break
    first = math.ceil(lo / step) * step
    out, v = [], first
    while v <= hi + 1e-12 * abs(step):
        out.append(round(v, 12))
        v += step
    return out


def _range(values, pad=0.05):
    finite = [v for v in values if math.isfinite(v)]
    if not finite:
        return 0.0, 1.0
    lo, hi = min(finite), max(finite)
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    span = hi - lo
    return lo - pad * span, hi + pad * span


class _Frame:
    def __init__(self, xr, yr, title, xlabel, ylabel):
        self.xr, self.yr = xr, yr
        self.x0, self.x1 = MARGIN["left"], WIDTH - MARGIN["right"]
        self.y0, self.y1 = HEIGHT - MARGIN["bottom"], MARGIN["top"]
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
            f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
            f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
            f'<text x="{WIDTH / 2}" y="20" text-anchor="middle" font-size="13">{escape(title)}</text>',
        ]
        self._axes(xlabel, ylabel)

    def px(self, x):
        return self.x0 + (x - self.xr[0]) / (self.xr[1] - self.xr[0]) * (self.x1 - self.x0)

    def py(self, y):
        return self.y0 - (y - self.yr[0]) / (self.yr[1] - self.yr[0]) * (self.y0 - self.y1)

    def _axes(self, xlabel, ylabel):
        p = self.parts
        p.append(f'<rect x="{self.x0}" y="{self.y1}" width="{self.x1 - self.x0}" height="{self.y0 - self.y1}" '
                 'fill="none" stroke="#444"/>')
        for t in _ticks(*self.xr):
            x = self.px(t)
            p.append(f'<line x1="{x:.2f}" y1="{self.y0}" x2="{x:.2f}" y2="{self.y0 + 4}" stroke="#444"/>')
            p.append(f'<text x="{x:.2f}" y="{self.y0 + 16}" text-anchor="middle">{t:g}</text>')
        for t in _ticks(*self.yr):
            y = self.py(t)
            p.append(f'<line x1="{self.x0 - 4}" y1="{y:.2f}" x2="{self.x0}" y2="{y:.2f}" stroke="#444"/>')
            p.append(f'<text x="{self.x0 - 6}" y="{y + 4:.2f}" text-anchor="end">{t:g}</text>')
        p.append(f'<text x="{(self.x0 + self.x1) / 2}" y="{HEIGHT - 10}" text-anchor="middle">{escape(xlabel)}</text>')
        cy = (self.y0 + self.y1) / 2
        p.append(f'<text x="14" y="{cy}" text-anchor="middle" transform="rotate(-90 14 {cy})">{escape(ylabel)}</text>')

    def legend(self, labels):
        for i, label in enumerate(labels):
            y = self.y1 + 14 + 14 * i
            colour = PALETTE[i % len(PALETTE)]
            self.parts.append(f'<rect x="{self.x1 - 120}" y="{y - 8}" width="10" height="10" fill="{colour}"/>')
            self.parts.append(f'<text x="{self.x1 - 105}" y="{y + 1}">{escape(label)}</text>')

    def render(self):
        return "\n".join(self.parts + ["</svg>"]) + "\n"


def scatter_svg(observed, predicted, title="", max_points=5000):
    """Observed (x) against predicted (y) with the identity line."""
    obs = [float(v) for v in observed]
    pred = [float(v) for v in predicted]
    if len(obs) > max_points:
        stride = math.ceil(len(obs) / max_points)
        obs, pred = obs[::stride], pred[::stride]
    lo, hi = _range(obs + pred)
    f = _Frame((lo, hi), (lo, hi), title, "observed", "predicted")
    f.parts.append(f'<line x1="{f.px(lo):.2f}" y1="{f.py(lo):.2f}" x2="{f.px(hi):.2f}" y2="{f.py(hi):.2f}" '
                   'stroke="#999" stroke-dasharray="4 3"/>')
    for o, p in zip(obs, pred):
        f.parts.append(f'<circle cx="{f.px(o):.2f}" cy="{f.py(p):.2f}" r="1.6" fill="{PALETTE[0]}" '
                       'fill-opacity="0.45"/>')
    return f.render()


def lines_svg(series, title="", xlabel="epoch", ylabel="loss"):
    """One polyline per ``(label, ys)`` pair, x running from 1."""
    series = [(label, [float(v) for v in ys]) for label, ys in series]
    n = max((len(ys) for _, ys in series), default=1)
    yr = _range([v for _, ys in series for v in ys])
    f = _Frame((1, max(n, 2)), yr, title, xlabel, ylabel)
    for i, (_, ys) in enumerate(series):
        pts = " ".join(f"{f.px(k + 1):.2f},{f.py(v):.2f}" for k, v in enumerate(ys) if math.isfinite(v))
        f.parts.append(f'<polyline points="{pts}" fill="none" stroke="{PALETTE[i % len(PALETTE)]}" '
                       'stroke-width="1.5"/>')
    f.legend([label for label, _ in series])
    return f.render()
