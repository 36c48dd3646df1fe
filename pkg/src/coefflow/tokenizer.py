"""Lossless per-output-unit tokenization of forecaster weights.

conv kernel ``(C_out, C_in, h, w)``  -> C_out tokens of length C_in*h*w
linear ``W (D_out, D_in), b (D_out)`` -> D_out tokens ``[W[o], b[o]]``
norm affine ``scale, shift (D)``    -> one token ``[scale; shift]``

Tokens are ordered layer-major, then by output unit. The payload layout
matches the checkpoint container: conv kernels flat, linear weight then
bias, norm scale then shift.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .checkpoint import entry_size


class SchemaMismatch(ValueError):
    pass


@dataclass(frozen=True)
class LayerDescriptor:
    index: int
    name: str
    kind: str  # conv | linear | norm_affine | flat
    shape: tuple
    token_count: int
    token_dim: int

    @property
    def n_values(self) -> int:
        if self.kind == "flat":
            return int(self.shape[0])
        return entry_size({"kind": self.kind, "shape": self.shape})

    def as_entry(self) -> dict:
        entry = {"name": self.name, "kind": self.kind, "shape": list(self.shape)}
        if self.kind == "flat":
            entry["token_dim"] = self.token_dim
        return entry


def describe_layer(index: int, name: str, kind: str, shape, token_dim: int | None = None) -> LayerDescriptor:
    shape = tuple(int(s) for s in shape)
    if kind == "flat":
        if not token_dim or token_dim < 1:
            raise SchemaMismatch("flat layers need a positive token_dim")
        return LayerDescriptor(index, name, kind, shape, -(-shape[0] // token_dim), int(token_dim))
    if kind == "conv":
        return LayerDescriptor(index, name, kind, shape, shape[0], int(np.prod(shape[1:])))
    if kind == "linear":
        return LayerDescriptor(index, name, kind, shape, shape[0], shape[1] + 1)
    if kind == "norm_affine":
        return LayerDescriptor(index, name, kind, shape, 1, 2 * shape[0])
    raise SchemaMismatch(f"cannot tokenize layer kind {kind!r}")


@dataclass(frozen=True)
class WeightSchema:
    layers: tuple

    @property
    def n_tokens(self) -> int:
        return sum(l.token_count for l in self.layers)

    @property
    def n_values(self) -> int:
        return sum(l.n_values for l in self.layers)

    def token_layer_index(self) -> np.ndarray:
        """Layer index of every token, in sequence order."""
        return np.repeat([l.index for l in self.layers], [l.token_count for l in self.layers])

    def entries(self) -> list[dict]:
        return [l.as_entry() for l in self.layers]

    @classmethod
    def from_entries(cls, entries) -> "WeightSchema":
        return cls(tuple(describe_layer(i, e["name"], e["kind"], e["shape"], e.get("token_dim"))
                         for i, e in enumerate(entries)))

    @property
    def is_flat(self) -> bool:
        return any(l.kind == "flat" for l in self.layers)


@dataclass
class TokenSequence:
    schema: WeightSchema
    blocks: list  # per layer: (token_count, token_dim) array

    @property
    def M(self) -> int:
        return self.schema.n_tokens

    @property
    def tokens(self) -> list[np.ndarray]:
        return [row for blk in self.blocks for row in blk]


def derive_schema(cfg, g=None) -> WeightSchema:
    """Schema of every parameterized forecaster layer in execution order.

    The graph only fixes ``n``, which no parameter depends on.
    """
    from .forecaster import layer_table

    return WeightSchema(tuple(describe_layer(i, *row) for i, row in enumerate(layer_table(cfg))))


def tokenize_payload(schema: WeightSchema, payload) -> TokenSequence:
    payload = np.asarray(payload, dtype=np.float64)
    if payload.ndim != 1 or payload.size != schema.n_values:
        raise SchemaMismatch(f"payload has {payload.size} values, schema needs {schema.n_values}")
    blocks, off = [], 0
    for layer in schema.layers:
        n = layer.n_values
        chunk = payload[off:off + n]
        off += n
        if layer.kind == "conv":
            blk = chunk.reshape(layer.token_count, layer.token_dim)
        elif layer.kind == "linear":
            d_out, d_in = layer.shape
            W = chunk[:d_out * d_in].reshape(d_out, d_in)
            blk = np.concatenate([W, chunk[d_out * d_in:, None]], axis=1)
        elif layer.kind == "norm_affine":
            blk = chunk.reshape(1, -1)
        elif layer.kind == "flat":
            blk = np.zeros(layer.token_count * layer.token_dim)
            blk[:n] = chunk
            blk = blk.reshape(layer.token_count, layer.token_dim)
        else:
            raise SchemaMismatch(f"layer {layer.index}: kind {layer.kind!r} is not structural")
        blocks.append(blk.copy())
    return TokenSequence(schema, blocks)


def tokenize(checkpoint) -> TokenSequence:
    return tokenize_payload(checkpoint.schema, checkpoint.payload)


def detokenize(seq: TokenSequence) -> np.ndarray:
    parts = []
    for layer, blk in zip(seq.schema.layers, seq.blocks):
        blk = np.asarray(blk, dtype=np.float64)
        if blk.shape != (layer.token_count, layer.token_dim):
            raise SchemaMismatch(
                f"layer {layer.index}: tokens {blk.shape} != ({layer.token_count}, {layer.token_dim})"
            )
        if layer.kind == "linear":
            parts += [blk[:, :-1].ravel(), blk[:, -1]]
        elif layer.kind == "flat":
            parts.append(blk.ravel()[:layer.n_values])
        else:
            parts.append(blk.ravel())
    return np.concatenate(parts)


def flatten_ablation_tokenize(checkpoint, token_dim: int) -> TokenSequence:
    """Concatenate every parameter, zero-pad and cut into equal tokens."""
    return flat_tokenize_payload(checkpoint.payload, token_dim)


def flat_schema(n_values: int, token_dim: int) -> WeightSchema:
    if token_dim < 1:
        raise ValueError("token_dim must be >= 1")
    return WeightSchema((describe_layer(0, "flat", "flat", (n_values,), token_dim),))


def flat_tokenize_payload(payload, token_dim: int) -> TokenSequence:
    payload = np.asarray(payload, dtype=np.float64).ravel()
    return tokenize_payload(flat_schema(payload.size, token_dim), payload)


def sequence_from_array(schema: WeightSchema, tokens_by_layer) -> TokenSequence:
    return TokenSequence(schema, [np.asarray(b, dtype=np.float64) for b in tokens_by_layer])
