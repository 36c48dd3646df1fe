"""Transformer building blocks shared by the weight VAE and the vector field."""
from __future__ import annotations

import numpy as np

from . import ops
from .params import ParamStore, add_linear, add_norm

FFN_MULT = 4


def add_attention(store: ParamStore, rng, prefix: str, d: int):
    for proj in ("q", "k", "v", "o"):
        add_linear(store, rng, f"{prefix}.{proj}", d, d)


def add_ffn(store: ParamStore, rng, prefix: str, d: int):
    add_linear(store, rng, f"{prefix}.fc1", d, FFN_MULT * d)
    add_linear(store, rng, f"{prefix}.fc2", FFN_MULT * d, d)


def add_block(store: ParamStore, rng, prefix: str, d: int):
    add_attention(store, rng, f"{prefix}.attn", d)
    add_norm(store, f"{prefix}.ln1", d)
    add_ffn(store, rng, f"{prefix}.ffn", d)
    add_norm(store, f"{prefix}.ln2", d)


def attention(P: ParamStore, prefix: str, h, heads: int):
    return ops.multi_head_attention(
        h, P[f"{prefix}.q.weight"], P[f"{prefix}.k.weight"], P[f"{prefix}.v.weight"], P[f"{prefix}.o.weight"],
        heads, P[f"{prefix}.q.bias"], P[f"{prefix}.k.bias"], P[f"{prefix}.v.bias"], P[f"{prefix}.o.bias"],
    )


def feed_forward(P: ParamStore, prefix: str, h):
    return ops.ffn(h, P[f"{prefix}.fc1.weight"], P[f"{prefix}.fc1.bias"],
                   P[f"{prefix}.fc2.weight"], P[f"{prefix}.fc2.bias"])


def block(P: ParamStore, prefix: str, h, heads: int, dropout: float = 0.0,
          rng: np.random.Generator | None = None, training: bool = False):
    """Post-norm block: ``LN(h + MHA(h))`` then ``LN(h + FFN(h))``."""
    a = ops.dropout(attention(P, f"{prefix}.attn", h, heads), dropout, rng, training)
    h = ops.layer_norm(ops.add(h, a), P[f"{prefix}.ln1.scale"], P[f"{prefix}.ln1.shift"])
    f = ops.dropout(feed_forward(P, f"{prefix}.ffn", h), dropout, rng, training)
    return ops.layer_norm(ops.add(h, f), P[f"{prefix}.ln2.scale"], P[f"{prefix}.ln2.shift"])


def add_mlp(store: ParamStore, rng, prefix: str, d_in: int, d_hidden: int, d_out: int):
    add_linear(store, rng, f"{prefix}.fc1", d_in, d_hidden)
    add_linear(store, rng, f"{prefix}.fc2", d_hidden, d_out)


def mlp(P: ParamStore, prefix: str, x, act=ops.relu):
    h = act(ops.linear(x, P[f"{prefix}.fc1.weight"], P[f"{prefix}.fc1.bias"]))
    return ops.linear(h, P[f"{prefix}.fc2.weight"], P[f"{prefix}.fc2.bias"])
