"""Minimal hand-written SVG output: domains, meshes, nodal fields, line plots."""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

SIZE = 480
PAD = 20


class _Frame:
    """Maps a data bounding box onto the canvas (y up)."""

    def __init__(self, points, size=SIZE, pad=PAD):
        pts = np.asarray(points, dtype=float)
        self.lo = pts.min(axis=0)
        span = np.ptp(pts, axis=0)
        self.scale = (size - 2 * pad) / max(float(span.max()), 1e-300)
        self.pad = pad
        self.height = int(round(span[1] * self.scale)) + 2 * pad
        self.width = int(round(span[0] * self.scale)) + 2 * pad

    def map(self, p):
        p = np.asarray(p, dtype=float)
        x = self.pad + (p[..., 0] - self.lo[0]) * self.scale
        y = self.height - self.pad - (p[..., 1] - self.lo[1]) * self.scale
        return np.stack([x, y], axis=-1)


def _doc(width, height, body, title=None):
    head = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    if title:
        head.append(f'<title>{escape(title)}</title>')
    return "\n".join(head + body + ["</svg>", ""])


def _path(pts, closed=True):
    cmds = " ".join(f"{'M' if i == 0 else 'L'}{x:.3f},{y:.3f}" for i, (x, y) in enumerate(pts))
    return cmds + (" Z" if closed else "")


def domain_svg(domains, colors=None, title=None, marks=()):
    """Outline one or several polygons in a common frame; ``marks`` are (center, radius) circles."""
    colors = colors or ["black", "crimson", "royalblue", "darkgreen"]
    frame = _Frame(np.vstack([d.vertices for d in domains]))
    body = []
    for d, col in zip(domains, colors * len(domains)):
        body.append(
            f'<path d="{_path(frame.map(d.vertices))}" fill="none" stroke="{col}" stroke-width="1"/>'
        )
    for center, radius in marks:
        cx, cy = frame.map(center)
        body.append(
            f'<circle cx="{cx:.3f}" cy="{cy:.3f}" r="{radius * frame.scale:.3f}" fill="none" '
            'stroke="gray" stroke-dasharray="3,2"/>'
        )
    return _doc(frame.width, frame.height, body, title)


def mesh_svg(mesh, title=None):
    frame = _Frame(mesh.nodes)
    p = frame.map(mesh.nodes)
    body = ['<g fill="none" stroke="steelblue" stroke-width="0.3">']
    for tri in mesh.triangles:
        body.append(f'<path d="{_path(p[tri])}"/>')
    body.append("</g>")
    return _doc(frame.width, frame.height, body, title)


def _color(v):
    # blue - white - red diverging map on [-1, 1]
    v = float(np.clip(v, -1.0, 1.0))
    if v >= 0:
        r, g, b = 255, int(255 * (1 - v)), int(255 * (1 - v))
    else:
        r, g, b = int(255 * (1 + v)), int(255 * (1 + v)), 255
    return f"#{r:02x}{g:02x}{b:02x}"


def field_svg(mesh, nodal, title=None):
    """Piecewise-constant heatmap of a nodal field (triangle means)."""
    frame = _Frame(mesh.nodes)
    p = frame.map(mesh.nodes)
    vals = np.asarray(nodal, dtype=float)[mesh.triangles].mean(axis=1)
    scale = max(float(np.max(np.abs(vals))), 1e-300)
    body = ['<g stroke="none">']
    for tri, v in zip(mesh.triangles, vals):
        col = _color(v / scale)
        body.append(f'<path d="{_path(p[tri])}" fill="{col}" stroke="{col}" stroke-width="0.2"/>')
    body.append("</g>")
    return _doc(frame.width, frame.height, body, title)


def line_plot_svg(x, series, labels=None, title=None, width=SIZE, height=300):
    """Simple multi-series line plot with axis extents printed at the corners."""
    x = np.asarray(x, dtype=float)
    ys = [np.asarray(y, dtype=float) for y in series]
    ymin = min(float(y.min()) for y in ys)
    ymax = max(float(y.max()) for y in ys)
    if ymax == ymin:
        ymax = ymin + 1.0
    xmin, xmax = float(x.min()), float(x.max())
    if xmax == xmin:
        xmax = xmin + 1.0

    def map_pt(xx, yy):
        px = PAD + (xx - xmin) / (xmax - xmin) * (width - 2 * PAD)
        py = height - PAD - (yy - ymin) / (ymax - ymin) * (height - 2 * PAD)
        return np.column_stack([px, py])

    colors = ["black", "crimson", "royalblue", "darkgreen", "darkorange"]
    body = [
        f'<rect x="{PAD}" y="{PAD}" width="{width - 2 * PAD}" height="{height - 2 * PAD}" '
        'fill="none" stroke="gray" stroke-width="0.5"/>'
    ]
    for i, y in enumerate(ys):
        body.append(
            f'<path d="{_path(map_pt(x, y), closed=False)}" fill="none" '
            f'stroke="{colors[i % len(colors)]}" stroke-width="1"/>'
        )
        if labels:
            body.append(
                f'<text x="{width - PAD - 4}" y="{PAD + 12 * (i + 1)}" font-size="10" text-anchor="end" '
                f'fill="{colors[i % len(colors)]}">{escape(str(labels[i]))}</text>'
            )
    body.append(f'<text x="{PAD}" y="{height - 4}" font-size="9">{xmin:.4g}</text>')
    body.append(f'<text x="{width - PAD}" y="{height - 4}" font-size="9" text-anchor="end">{xmax:.4g}</text>')
    body.append(f'<text x="2" y="{PAD - 4}" font-size="9">{ymax:.4g}</text>')
    body.append(f'<text x="2" y="{height - PAD}" font-size="9">{ymin:.4g}</text>')
    return _doc(width, height, body, title)
