"""Summary timelines as plain SVG.

Each method gets one horizontal track with a filled block per selected shot.
An optional score curve with keyframe ticks is drawn under the tracks.
Output bytes depend only on the inputs.
"""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

WIDTH = 800
LABEL_W = 120
TRACK_H = 18
GAP = 8
CURVE_H = 80
MARGIN = 10


def _f(x: float) -> str:
    return f"{x:.3f}"


def timeline_svg(summaries, labels=None, reference=None, scores=None, keyframes=None,
                 title: str | None = None) -> str:
    """Render ``summaries`` (plus an optional reference track) as an SVG string.

    ``scores`` is a per-frame curve (``None`` entries are skipped) and
    ``keyframes`` a list of frame indices marked with ticks on it.
    """
    summaries = list(summaries)
    labels = list(labels) if labels is not None else [f"method {i + 1}" for i in range(len(summaries))]
    if len(labels) != len(summaries):
        raise ValueError(f"{len(labels)} labels for {len(summaries)} summaries")
    tracks = [(label, s, "method") for label, s in zip(labels, summaries)]
    if reference is not None:
        tracks.append(("reference", reference, "reference"))
    frames = {s.num_frames for _, s, _ in tracks}
    if scores is not None:
        frames.add(len(scores))
    if len(frames) > 1:
        raise ValueError(f"inputs disagree on the frame count: {sorted(frames)}")
    if not frames:
        raise ValueError("nothing to plot")
    n = frames.pop()
    if n < 1:
        raise ValueError("frame count must be positive")

    plot_w = WIDTH - LABEL_W - 2 * MARGIN
    x0 = LABEL_W + MARGIN
    top = MARGIN + (20 if title else 0)

    def fx(frame):
        return x0 + plot_w * frame / n

    height = top + len(tracks) * (TRACK_H + GAP) + (CURVE_H + GAP if scores is not None else 0) + MARGIN
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" '
           f'viewBox="0 0 {WIDTH} {height}" data-num-frames="{n}">']
    if title:
        out.append(f'<text x="{MARGIN}" y="{MARGIN + 12}" font-size="13">{escape(title)}</text>')
    y = top
    for label, summary, kind in tracks:
        out.append(f'<g class="track" data-kind="{kind}" data-label="{escape(label)}">')
        out.append(f'<text x="{MARGIN}" y="{_f(y + TRACK_H - 5)}" font-size="11">{escape(label)}</text>')
        out.append(f'<rect class="bar" x="{_f(x0)}" y="{y}" width="{_f(plot_w)}" height="{TRACK_H}" '
                   f'fill="#eeeeee"/>')
        for s, e in summary.shots:
            out.append(f'<rect class="shot" x="{_f(fx(s))}" y="{y}" width="{_f(fx(e) - fx(s))}" '
                       f'height="{TRACK_H}" fill="#000000" data-start="{s}" data-end="{e}"/>')
        out.append("</g>")
        y += TRACK_H + GAP

    if scores is not None:
        vals = np.array([np.nan if v is None else float(v) for v in scores])
        finite = vals[np.isfinite(vals)]
        lo, hi = (float(finite.min()), float(finite.max())) if finite.size else (0.0, 1.0)
        span = hi - lo if hi > lo else 1.0

        def fy(v):
            return y + CURVE_H - CURVE_H * (v - lo) / span

        out.append('<g class="scores">')
        out.append(f'<rect x="{_f(x0)}" y="{y}" width="{_f(plot_w)}" height="{CURVE_H}" fill="none" '
                   f'stroke="#999999"/>')
        if lo < 0 < hi:
            out.append(f'<line class="zero" x1="{_f(x0)}" x2="{_f(x0 + plot_w)}" y1="{_f(fy(0))}" '
                       f'y2="{_f(fy(0))}" stroke="#999999" stroke-dasharray="3,3"/>')
        pts = " ".join(f"{_f(fx(i + 0.5))},{_f(fy(v))}" for i, v in enumerate(vals) if np.isfinite(v))
        out.append(f'<polyline points="{pts}" fill="none" stroke="#1f77b4"/>')
        for k in keyframes or []:
            out.append(f'<line class="keyframe" x1="{_f(fx(k + 0.5))}" x2="{_f(fx(k + 0.5))}" '
                       f'y1="{y}" y2="{y + CURVE_H}" stroke="#d62728" data-frame="{int(k)}"/>')
        out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"
