"""SVG drawings of sampled configurations.

Edges are drawn under nodes, everything is clipped to the box and nodes are
coloured by cluster.  For weighted models the node radius grows linearly with
the weight; unweighted models use one radius for every node.
"""

from __future__ import annotations

import colorsys

import numpy as np

from .continuum import PointConfiguration, cluster_labels

BASE_RADIUS = 0.08  # node radius at weight 1, in box units
STROKE = 0.02


def cluster_colors(labels: np.ndarray) -> dict:
    """Colour per cluster label; singletons are grey, larger clusters get spread hues."""
    labels = np.asarray(labels)
    uniq, counts = np.unique(labels, return_counts=True)
    big = uniq[counts > 1]
    # golden-angle hue steps keep neighbouring labels distinguishable
    colors = {int(u): "#9a9a9a" for u in uniq[counts == 1]}
    for j, u in enumerate(big):
        h = (j * 0.618033988749895) % 1.0
        r, g, b = colorsys.hls_to_rgb(h, 0.45, 0.65)
        colors[int(u)] = f"#{int(r * 255):02x}{int(g * 255):02x}{int(b * 255):02x}"
    return colors


def node_radii(config: PointConfiguration, weighted: bool | None = None) -> np.ndarray:
    if weighted is None:
        weighted = config.model.weights.kind != "point"
    if weighted:
        return BASE_RADIUS * config.weights
    return np.full(config.size, BASE_RADIUS)


def render_svg(config: PointConfiguration, size_px: int = 800, weighted: bool | None = None,
               labels: np.ndarray | None = None) -> str:
    """SVG text for a two-dimensional configuration.

    The view box is ``[-box, box]^2`` with the y axis pointing up.
    """
    if config.model.dimension != 2:
        raise ValueError("rendering needs a two-dimensional model")
    L = float(config.box)
    pos = config.positions
    I, J = config.graph().open_edges()
    labels = cluster_labels(config) if labels is None else np.asarray(labels)
    colors = cluster_colors(labels) if config.size else {}
    radii = node_radii(config, weighted)
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size_px}" height="{size_px}" '
        f'viewBox="{-L!r} {-L!r} {2 * L!r} {2 * L!r}">',
        '<defs><clipPath id="box">'
        f'<rect x="{-L!r}" y="{-L!r}" width="{2 * L!r}" height="{2 * L!r}"/></clipPath></defs>',
        f'<rect x="{-L!r}" y="{-L!r}" width="{2 * L!r}" height="{2 * L!r}" fill="white" '
        f'stroke="black" stroke-width="{STROKE!r}"/>',
        # flip y so the picture has the usual orientation
        '<g clip-path="url(#box)" transform="scale(1,-1)">',
        f'<g id="edges" stroke="#555555" stroke-width="{STROKE!r}" stroke-opacity="0.7">',
    ]
    for a, b in zip(I.tolist(), J.tolist()):
        out.append(f'<line x1="{pos[a, 0]:.6f}" y1="{pos[a, 1]:.6f}" x2="{pos[b, 0]:.6f}" y2="{pos[b, 1]:.6f}"/>')
    out.append("</g>")
    out.append('<g id="nodes" stroke="black" stroke-width="0.01">')
    for i in range(config.size):
        col = colors[int(labels[i])]
        extra = ' stroke-width="0.03"' if config.augmented[i] else ""
        out.append(f'<circle cx="{pos[i, 0]:.6f}" cy="{pos[i, 1]:.6f}" r="{radii[i]:.6f}" '
                   f'fill="{col}"{extra}/>')
    out.append("</g>")
    out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"
