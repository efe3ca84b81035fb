"""Measurements over decoder traces: position-bias histograms and per-layer
visual attention sums, with fixed-schema CSV output.

CSV schemas (column order is part of the interface):
    bias_histogram.csv   layer,row,col,count
    attention_sums.csv   layer,head,sum
"""

import csv
from dataclasses import dataclass

import numpy as np

from .decoder_prune import text_attention_scores
from .errors import ConfigError, LayoutError
from .numerics import round_half_up, top_k_indices
from .trace_io import DecoderTrace

__all__ = [
    "BiasHistogram",
    "AttentionSumCurve",
    "position_bias_histogram",
    "attention_sum_per_layer",
    "write_bias_histogram_csv",
    "write_attention_sums_csv",
]


@dataclass
class BiasHistogram:
    """Grid counts of the tokens a given layer's attention would retain."""

    layer: int
    retention: float
    counts: np.ndarray  # (grid_h, grid_w) integer counts
    retained: list[int]  # ascending visual-token indices


@dataclass
class AttentionSumCurve:
    """Visual attention mass of the last instruction token, per layer."""

    per_head: np.ndarray  # (n_layers, n_heads)
    head_mean: np.ndarray  # (n_layers,)


def position_bias_histogram(
    trace: DecoderTrace,
    layer: int,
    retention: float,
    grid_h: int,
    grid_w: int,
) -> BiasHistogram:
    """Bin the top-``retention`` tokens at a 1-based layer by grid cell.

    Selection uses the same head-averaged score and top-k path as the
    pruning stage, so at equal retention the two retain identical sets.
    """
    if not 0.0 < retention <= 1.0:
        raise ConfigError("retention", f"must be in (0, 1], got {retention}")
    if grid_h * grid_w != trace.n_visual:
        raise LayoutError(
            f"grid {grid_h}x{grid_w} does not cover {trace.n_visual} visual tokens"
        )
    scores = text_attention_scores(trace, layer)
    budget = round_half_up(retention * trace.n_visual)
    retained = top_k_indices(scores, budget)
    counts = np.zeros((grid_h, grid_w), dtype=np.int64)
    for idx in retained:
        counts[idx // grid_w, idx % grid_w] += 1
    return BiasHistogram(
        layer=layer, retention=retention, counts=counts, retained=retained
    )


def attention_sum_per_layer(trace: DecoderTrace) -> AttentionSumCurve:
    """Sum the last-instruction row over the visual span, per layer and head."""
    start, stop = trace.visual_span
    per_head = trace.last_instr_attention[:, :, start:stop].sum(axis=2)
    return AttentionSumCurve(per_head=per_head, head_mean=per_head.mean(axis=1))


def write_bias_histogram_csv(hist: BiasHistogram, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "row", "col", "count"])
        grid_h, grid_w = hist.counts.shape
        for r in range(grid_h):
            for c in range(grid_w):
                writer.writerow([hist.layer, r, c, int(hist.counts[r, c])])


def write_attention_sums_csv(curve: AttentionSumCurve, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "head", "sum"])
        n_layers, n_heads = curve.per_head.shape
        for i in range(n_layers):
            for h in range(n_heads):
                writer.writerow([i + 1, h, f"{curve.per_head[i, h]:.12g}"])
