"""SVG renderings: per-timestep box evolution and prediction overlays."""

from __future__ import annotations

import base64
import colorsys
import io
from typing import Sequence
from xml.sax.saxutils import escape, quoteattr

import matplotlib

matplotlib.use("Agg")
from matplotlib import image as mpimg  # noqa: E402

import numpy as np  # noqa: E402

from .model import DecodeResult, Prediction  # noqa: E402

LEGEND_WIDTH = 190
PALETTE = ("#e6194b", "#3cb44b", "#4363d8", "#f58231", "#911eb4", "#42d4f4", "#f032e6", "#bfef45")


def png_data_uri(image: np.ndarray) -> str:
    """Encode a ``3×H×W`` float image in ``[0, 1]`` as a PNG data URI."""
    buf = io.BytesIO()
    mpimg.imsave(buf, np.clip(np.transpose(image, (1, 2, 0)), 0.0, 1.0), format="png")
    return "data:image/png;base64," + base64.b64encode(buf.getvalue()).decode("ascii")


def step_colors(n: int, hue: float = 0.33) -> list[str]:
    """``n`` colors of fixed hue whose brightness increases strictly with the index."""
    out = []
    for i in range(n):
        v = 0.3 + 0.7 * (i / (n - 1) if n > 1 else 1.0)
        r, g, b = colorsys.hsv_to_rgb(hue, 0.9, v)
        out.append(f"#{round(r * 255):02x}{round(g * 255):02x}{round(b * 255):02x}")
    return out


def _rect(box, color: str, cls: str, width: float = 2.0, dash: str = "", extra: str = "") -> str:
    x1, y1, x2, y2 = (float(v) for v in box)
    if dash:
        extra += f' stroke-dasharray="{dash}"'
    return (f'<rect class="{cls}" x="{x1:.2f}" y="{y1:.2f}" width="{x2 - x1:.2f}" height="{y2 - y1:.2f}" '
            f'fill="none" stroke="{color}" stroke-width="{width}"{extra}/>')


def _header(w: int, h: int) -> list[str]:
    return [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" '
            'font-family="monospace" font-size="11">']


def render_steps_svg(image: np.ndarray, decode: DecodeResult, gt_box: np.ndarray | None = None) -> str:
    """One box per decoding step, darker to brighter in time, with a legend of fed words."""
    _, H, W = image.shape
    boxes = decode.intermediate_boxes
    colors = step_colors(len(boxes))
    parts = _header(W + LEGEND_WIDTH, max(H, 24 + 14 * (len(boxes) + 3)))
    parts.append(f'<image x="0" y="0" width="{W}" height="{H}" href="{png_data_uri(image)}"/>')
    parts.append(_rect(decode.proposal, "#ffffff", "proposal", 1.0, "3,2"))
    if gt_box is not None:
        parts.append(_rect(gt_box, "#ff00ff", "gt", 1.0, "1,2"))
    for i, (box, color) in enumerate(zip(boxes, colors)):
        if box is not None:
            parts.append(_rect(box.as_array(), color, "step", 1.5, extra=f' data-step="{i}"'))
    x = W + 8
    parts.append(f'<text x="{x}" y="14">caption: {escape(" ".join(decode.caption))}</text>')
    for i, (word, color) in enumerate(zip(decode.fed_words, colors)):
        y = 30 + 14 * i
        parts.append(f'<rect class="legend" x="{x}" y="{y - 9}" width="10" height="10" fill="{color}"/>')
        parts.append(f'<text class="fed" x="{x + 14}" y="{y}">t={i} {escape(word)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def overlay_svg(image: np.ndarray, predictions: Sequence[Prediction], scale: float = 1.0) -> str:
    """Predicted boxes with their captions and confidences drawn over the image."""
    _, H, W = image.shape
    W2, H2 = round(W * scale), round(H * scale)
    parts = _header(W2, H2)
    parts.append(f'<image x="0" y="0" width="{W2}" height="{H2}" href="{png_data_uri(image)}"/>')
    for i, p in enumerate(predictions):
        color = PALETTE[i % len(PALETTE)]
        box = p.box.as_array() * scale
        parts.append(_rect(box, color, "prediction"))
        label = f"{' '.join(p.caption)} ({p.confidence:.2f})"
        parts.append(f'<text x="{box[0] + 2:.2f}" y="{max(box[1] - 3, 10):.2f}" fill={quoteattr(color)}>'
                     f"{escape(label)}</text>")
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
