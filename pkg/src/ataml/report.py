"""Standalone HTML attention heatmaps and plain-text result tables."""

from __future__ import annotations

import html
import json
from pathlib import Path
from typing import Iterable, Sequence

from .learner import AttentionTrace

_STYLE = """
body { font-family: sans-serif; margin: 2em; max-width: 60em; }
.doc { margin: 1em 0; padding: 0.6em; border: 1px solid #ccc; border-radius: 4px; }
.meta { font-size: 0.85em; color: #444; margin-bottom: 0.4em; }
.tok { padding: 1px 2px; margin: 1px; border-radius: 2px; display: inline-block; }
.pos { border-bottom: 2px solid #b00; }
.neg { border-bottom: 2px solid #00b; }
.ok { color: #070; } .miss { color: #a00; }
"""


def intensities(alphas: Sequence[float]) -> list[float]:
    """|alpha| divided by the document's largest |alpha|; all zeros stay zero."""
    peak = max((abs(a) for a in alphas), default=0.0)
    if peak == 0.0:
        return [0.0 for _ in alphas]
    return [abs(a) / peak for a in alphas]


def _token_span(tok: str, alpha: float, level: float) -> str:
    # positive scores are red, negative scores blue; shading carries |alpha|
    rgb = "200,30,30" if alpha >= 0 else "30,60,200"
    cls = "pos" if alpha >= 0 else "neg"
    return (
        f'<span class="tok {cls}" style="background: rgba({rgb},{level!r})" '
        f'data-alpha="{alpha!r}" data-intensity="{level!r}" title="alpha = {alpha!r}">{html.escape(tok)}</span>'
    )


def render_attention_html(traces: Iterable[AttentionTrace], title: str = "Attention report") -> str:
    traces = list(traces)
    parts = [
        "<!DOCTYPE html>",
        '<html lang="en"><head><meta charset="utf-8">',
        f"<title>{html.escape(title)}</title>",
        f"<style>{_STYLE}</style></head><body>",
        f"<h1>{html.escape(title)}</h1>",
        "<p>Shading is |alpha| scaled by the largest |alpha| in each document. "
        "Red marks positive scores, blue negative. Hover a token for its raw score.</p>",
    ]
    if not traces:
        parts.append('<p class="notice">No attention traces to display.</p>')
    for i, tr in enumerate(traces):
        levels = intensities(tr.alphas)
        correct = tr.label == tr.prediction
        meta = " ".join(f"{html.escape(str(k))}={html.escape(str(v))}" for k, v in sorted(tr.meta.items()))
        parts.append(f'<div class="doc" id="doc{i}">')
        parts.append(
            f'<div class="meta">gold: <b>{html.escape(str(tr.label))}</b> | '
            f'prediction: <b class="{"ok" if correct else "miss"}">{html.escape(str(tr.prediction))}</b>'
            + (f" | {meta}" if meta else "")
            + "</div>"
        )
        parts.append(" ".join(_token_span(t, a, l) for t, a, l in zip(tr.tokens, tr.alphas, levels)))
        parts.append("</div>")
    parts.append("</body></html>")
    return "\n".join(parts) + "\n"


def load_traces(path: str | Path) -> list[AttentionTrace]:
    """Trace files are JSON lines, one AttentionTrace record per line."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(AttentionTrace.from_json(json.loads(line)))
    return out


def write_traces(path: str | Path, traces: Iterable[AttentionTrace]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for tr in traces:
            fh.write(json.dumps(tr.to_json(), sort_keys=True) + "\n")


def format_table(rows: Sequence[dict], columns: Sequence[str]) -> str:
    """Fixed-width text table; floats are shown as percentages when named mean/ci95."""

    def cell(row, c):
        v = row.get(c, "")
        if c in ("mean", "ci95") and isinstance(v, float):
            return f"{100 * v:.1f}"
        return str(v)

    body = [[cell(r, c) for c in columns] for r in rows]
    widths = [max([len(c)] + [len(b[i]) for b in body]) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(v.ljust(w) for v, w in zip(b, widths)) for b in body]
    return "\n".join(lines) + "\n"
