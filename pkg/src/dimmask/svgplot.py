"""Hand-emitted SVG scatter for sweep frontiers; no plotting library.

The output is a deterministic function of the frontier rows: same rows, same
bytes.  Total final dimensions on x, test RCE on y, one marker per run, the
no-mask baseline drawn as a distinct diamond.
"""

from __future__ import annotations

from typing import List

WIDTH, HEIGHT = 800, 600
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 70, 30, 40, 60

STYLE = {
    "l1": ("#1f77b4", "circle"),
    "l2": ("#d62728", "square"),
    "": ("#2ca02c", "diamond"),  # baseline
}


def _ticks(lo: float, hi: float, n: int = 5) -> List[float]:
    if hi <= lo:
        hi = lo + 1.0
    step = (hi - lo) / (n - 1)
    return [lo + i * step for i in range(n)]


def frontier_svg(rows: List[dict]) -> str:
    """Render frontier rows (see trainflow.read_frontier) to an SVG string."""
    pts = [r for r in rows if r.get("test_rce") is not None]
    xs = [float(r["total_dims"]) for r in pts] or [0.0, 1.0]
    ys = [float(r["test_rce"]) for r in pts] or [0.0, 1.0]
    x_lo, x_hi = 0.0, max(xs) * 1.1 + 1e-9
    pad = (max(ys) - min(ys)) * 0.15 + 1e-9
    y_lo, y_hi = min(ys) - pad, max(ys) + pad
    plot_w = WIDTH - MARGIN_L - MARGIN_R
    plot_h = HEIGHT - MARGIN_T - MARGIN_B

    def px(x):
        return MARGIN_L + (x - x_lo) / (x_hi - x_lo) * plot_w

    def py(y):
        return MARGIN_T + (y_hi - y) / (y_hi - y_lo) * plot_h

    s = [
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        '<g font-family="sans-serif" font-size="12" fill="#333">',
    ]
    # axes
    s.append(f'<line x1="{MARGIN_L}" y1="{HEIGHT - MARGIN_B}" x2="{WIDTH - MARGIN_R}" '
             f'y2="{HEIGHT - MARGIN_B}" stroke="#333"/>')
    s.append(f'<line x1="{MARGIN_L}" y1="{MARGIN_T}" x2="{MARGIN_L}" '
             f'y2="{HEIGHT - MARGIN_B}" stroke="#333"/>')
    for t in _ticks(x_lo, x_hi):
        x = px(t)
        s.append(f'<line x1="{x:.2f}" y1="{HEIGHT - MARGIN_B}" x2="{x:.2f}" '
                 f'y2="{HEIGHT - MARGIN_B + 5}" stroke="#333"/>')
        s.append(f'<text x="{x:.2f}" y="{HEIGHT - MARGIN_B + 20}" '
                 f'text-anchor="middle">{t:.0f}</text>')
    for t in _ticks(y_lo, y_hi):
        y = py(t)
        s.append(f'<line x1="{MARGIN_L - 5}" y1="{y:.2f}" x2="{MARGIN_L}" '
                 f'y2="{y:.2f}" stroke="#333"/>')
        s.append(f'<text x="{MARGIN_L - 9}" y="{y + 4:.2f}" '
                 f'text-anchor="end">{t:.2f}</text>')
    s.append(f'<text x="{MARGIN_L + plot_w / 2:.0f}" y="{HEIGHT - 15}" '
             f'text-anchor="middle">total final dimensions</text>')
    s.append(f'<text x="18" y="{MARGIN_T + plot_h / 2:.0f}" text-anchor="middle" '
             f'transform="rotate(-90 18 {MARGIN_T + plot_h / 2:.0f})">test RCE</text>')
    for r in pts:
        color, shape = STYLE.get(r["regularizer"], ("#777", "circle"))
        x, y = px(float(r["total_dims"])), py(float(r["test_rce"]))
        title = f'<title>{r["run"]}: dims={r["total_dims"]}, rce={r["test_rce"]:.4f}</title>'
        if shape == "circle":
            s.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="6" fill="{color}" '
                     f'fill-opacity="0.85">{title}</circle>')
        elif shape == "square":
            s.append(f'<rect x="{x - 5:.2f}" y="{y - 5:.2f}" width="10" height="10" '
                     f'fill="{color}" fill-opacity="0.85">{title}</rect>')
        else:
            s.append(f'<path d="M {x:.2f} {y - 8:.2f} L {x + 8:.2f} {y:.2f} '
                     f'L {x:.2f} {y + 8:.2f} L {x - 8:.2f} {y:.2f} Z" '
                     f'fill="{color}">{title}</path>')
    # legend
    lx, ly = WIDTH - MARGIN_R - 130, MARGIN_T + 10
    s.append(f'<circle cx="{lx}" cy="{ly}" r="6" fill="{STYLE["l1"][0]}"/>')
    s.append(f'<text x="{lx + 12}" y="{ly + 4}">l1</text>')
    s.append(f'<rect x="{lx - 5}" y="{ly + 15}" width="10" height="10" fill="{STYLE["l2"][0]}"/>')
    s.append(f'<text x="{lx + 12}" y="{ly + 24}">l2</text>')
    s.append(f'<path d="M {lx} {ly + 32} L {lx + 8} {ly + 40} L {lx} {ly + 48} '
             f'L {lx - 8} {ly + 40} Z" fill="{STYLE[""][0]}"/>')
    s.append(f'<text x="{lx + 12}" y="{ly + 44}">baseline</text>')
    s.append("</g>")
    s.append("</svg>")
    return "\n".join(s) + "\n"
