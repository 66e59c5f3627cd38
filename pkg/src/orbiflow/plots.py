"""Plain SVG output: box-set overlays and scalar heatmaps on the unit square."""
from __future__ import annotations

import numpy as np

SIZE = 512


def _open(title: str) -> list[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE + 24}" '
        f'viewBox="0 0 {SIZE} {SIZE + 24}">',
        f'<text x="4" y="16" font-family="monospace" font-size="13">{title}</text>',
        f'<rect x="0" y="24" width="{SIZE}" height="{SIZE}" fill="white" stroke="black"/>',
    ]


def box_overlay(cover, layers: dict, title: str = "") -> str:
    """layers maps a label to (node ids, fill color); every cell of each node is drawn."""
    if cover.dim != 2:
        raise ValueError("box overlays are drawn for two-dimensional covers only")
    s = SIZE / cover.resolution
    out = _open(title)
    for label, (nodes, color) in layers.items():
        cells = cover.cells_of_nodes(nodes) if len(nodes) else np.zeros(0, dtype=int)
        mi = cover.multi_index(cells)
        out.append(f'<g fill="{color}" fill-opacity="0.7"><title>{label}</title>')
        for i, j in mi:
            # x to the right, y upward
            out.append(f'<rect x="{i * s:.3f}" y="{24 + SIZE - (j + 1) * s:.3f}" width="{s:.3f}" height="{s:.3f}"/>')
        out.append("</g>")
    y = 36
    for label, (nodes, color) in layers.items():
        out.append(f'<text x="{SIZE - 150}" y="{y}" font-family="monospace" font-size="11" fill="{color}">'
                   f'{label} ({len(nodes)})</text>')
        y += 13
    out.append("</svg>")
    return "\n".join(out)


def heatmap(values: np.ndarray, title: str = "", levels: int = 12) -> str:
    """values[i, j] sampled at ((i + 0.5)/k, (j + 0.5)/k); contour bands drawn as gray levels."""
    v = np.asarray(values, dtype=float)
    k = v.shape[0]
    lo, hi = np.nanmin(v), np.nanmax(v)
    band = np.floor((v - lo) / max(hi - lo, 1e-300) * levels).clip(0, levels - 1)
    s = SIZE / k
    out = _open(f"{title} [{lo:.3g}, {hi:.3g}]")
    for i in range(k):
        for j in range(k):
            if np.isnan(v[i, j]):
                continue
            g = int(40 + 200 * band[i, j] / max(levels - 1, 1))
            out.append(f'<rect x="{i * s:.3f}" y="{24 + SIZE - (j + 1) * s:.3f}" width="{s:.3f}" height="{s:.3f}" '
                       f'fill="rgb({g},{g},{g})"/>')
    out.append("</svg>")
    return "\n".join(out)
