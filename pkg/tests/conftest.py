import numpy as np

from vtreduce import DecoderTrace, EncoderTrace


def softmax(x, axis=-1):
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def random_encoder_trace(
    rng,
    grid_h,
    grid_w,
    n_layers=2,
    n_heads=2,
    embed_dim=8,
    with_self=False,
):
    """Encoder trace with softmax-normalized random attention."""
    n = grid_h * grid_w
    cls_attn = softmax(rng.normal(size=(n_layers, n_heads, n)))
    self_attn = None
    if with_self:
        self_attn = softmax(rng.normal(size=(n_layers, n_heads, n, n)))
    emb = rng.normal(size=(n, embed_dim))
    return EncoderTrace(
        grid_h=grid_h,
        grid_w=grid_w,
        embeddings=emb,
        cls_attention=cls_attn,
        self_attention=self_attn,
    )


def uniform_decoder_trace(n_layers, n_heads, n_pre, n_visual, n_post):
    seq = n_pre + n_visual + n_post
    attn = np.full((n_layers, n_heads, seq), 1.0 / seq)
    return DecoderTrace(
        n_pre_text=n_pre,
        n_visual=n_visual,
        n_post_text=n_post,
        last_instr_attention=attn,
    )


def topk_oracle(scores, k):
    """Sort by (-score, index), take k, re-sort by index."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return sorted(order[:k])


def near_mass(trace, layer):
    """Mean attention mass within Chebyshev distance 1 of each query token."""
    n = trace.n_tokens
    rows, cols = np.divmod(np.arange(n), trace.grid_w)
    dr = np.abs(rows[:, None] - rows[None, :])
    dc = np.abs(cols[:, None] - cols[None, :])
    near = np.maximum(dr, dc) <= 1
    attn = trace.self_attention[layer - 1]
    return float((attn * near[None, :, :]).sum(axis=2).mean())
