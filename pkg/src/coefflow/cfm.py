"""Conditional flow matching over VAE latents.

The vector field is a Transformer over the latent token sequence. Each block
is preceded by an adaptive layer norm whose scale and shift come from the
condition vector, which sums an MLP embedding of the normalized environment
coefficients with a sinusoidal embedding of the flow time.

Training regresses the field onto the straight-path velocity ``z1 - z0``
with independent prior draws; generation integrates the learned ODE with
forward Euler from a seeded standard-normal start.
"""
from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .checkpoint import load_checkpoint, save_checkpoint, store_schema
from .dynamics import ConfigError, NumericError
from .nn import blocks

log = logging.getLogger(__name__)

POS_INIT_STD = 0.02
CLAMP_SPAN = 0.5  # normalized conditions may stray this far outside [0, 1]


@dataclass(frozen=True)
class CfmConfig:
    d_model: int = 128
    layers: int = 4
    heads: int = 2
    dropout: float = 0.1
    sigma_path: float = 0.0
    n_steps: int = 100
    lr: float = 1e-4
    weight_decay: float = 0.0
    batch: int = 64
    epochs: int = 500
    repeats: int = 1  # prior draws per latent within one batch

    def __post_init__(self):
        if self.n_steps < 1:
            raise ConfigError("n_steps must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.sigma_path < 0:
            raise ConfigError("sigma_path must be >= 0")
        if self.d_model % self.heads or self.d_model % 2:
            raise ConfigError(f"d_model={self.d_model} must be even and divisible by heads={self.heads}")
        if min(self.layers, self.batch, self.repeats) < 1 or self.epochs < 0:
            raise ConfigError("CFM sizes must be positive")


@dataclass
class FlowPathRecord:
    condition: np.ndarray
    states: list  # z_0 ... z_N, each (M, d_z)

    def __post_init__(self):
        for s in self.states:
            if not np.isfinite(s).all():
                raise NumericError("flow path contains non-finite states")

    def write_csv(self, path):
        """Long format: ``step, token, dim, value``."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "token", "dim", "value"])
            for k, z in enumerate(self.states):
                for (i, j), v in np.ndenumerate(z):
                    w.writerow([k, i, j, f"{v:.17g}"])


# ---------------------------------------------------------------------------
# path, target and embeddings
# ---------------------------------------------------------------------------

def sample_path_point(z0, z1, t, sigma_path: float = 0.0, noise=None):
    """``(1 - t) z0 + t z1 + sigma_path * noise``; ``t`` may broadcast per item."""
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0.0) or np.any(t_arr > 1.0):
        raise ValueError("flow time must lie in [0, 1]")
    z0, z1 = np.asarray(z0, dtype=np.float64), np.asarray(z1, dtype=np.float64)
    if z0.shape != z1.shape:
        raise ValueError(f"path endpoints differ in shape: {z0.shape} vs {z1.shape}")
    t_b = t_arr.reshape(t_arr.shape + (1,) * (z0.ndim - t_arr.ndim))
    zt = (1.0 - t_b) * z0 + t_b * z1
    if sigma_path and noise is not None:
        zt = zt + sigma_path * noise
    return zt


def target_velocity(z0, z1):
    return np.asarray(z1, dtype=np.float64) - np.asarray(z0, dtype=np.float64)


def sinusoidal_embedding(t, dim: int) -> np.ndarray:
    """``[sin(t w_k), cos(t w_k)]`` with ``dim / 2`` geometric frequencies."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    arg = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=-1)


@dataclass(frozen=True)
class ConditionNormalizer:
    """Maps each coefficient's manifest range onto [0, 1]."""

    names: tuple
    lo: tuple
    hi: tuple

    @classmethod
    def from_ranges(cls, ranges: dict, names) -> "ConditionNormalizer":
        names = tuple(names)
        return cls(names, tuple(float(ranges[k][0]) for k in names), tuple(float(ranges[k][1]) for k in names))

    def __call__(self, e) -> np.ndarray:
        e = np.atleast_2d(np.asarray(e, dtype=np.float64))
        if e.shape[-1] != len(self.names):
            raise ValueError(f"condition has {e.shape[-1]} entries, expected {len(self.names)}")
        lo, hi = np.array(self.lo), np.array(self.hi)
        width = hi - lo
        # a coefficient held fixed across the dataset normalizes to 0
        safe = np.where(width > 0, width, 1.0)
        u = np.where(width > 0, (e - lo) / safe, e - lo)
        bad = (u < -CLAMP_SPAN) | (u > 1.0 + CLAMP_SPAN)
        if bad.any():
            warnings.warn(f"condition {e.tolist()} lies outside twice the manifest range; clamped", stacklevel=2)
            u = np.clip(u, -CLAMP_SPAN, 1.0 + CLAMP_SPAN)
        return u

    def as_dict(self) -> dict:
        return {"names": list(self.names), "lo": list(self.lo), "hi": list(self.hi)}

    @classmethod
    def from_dict(cls, d) -> "ConditionNormalizer":
        return cls(tuple(d["names"]), tuple(d["lo"]), tuple(d["hi"]))


def adaln_modulate(h, gamma, beta):
    """``gamma * LayerNorm(h) + beta`` with per-item, per-channel ``gamma``/``beta``."""
    normed = nn.layer_norm(h)
    g = nn.reshape(gamma, gamma.shape[:-1] + (1, gamma.shape[-1]))
    b = nn.reshape(beta, beta.shape[:-1] + (1, beta.shape[-1]))
    return nn.add(nn.mul(normed, g), b)


# ---------------------------------------------------------------------------
# vector field
# ---------------------------------------------------------------------------

class VectorFieldNet:
    def __init__(self, n_tokens: int, d_z: int, cond_dim: int, cfg: CfmConfig, seed: int = 0):
        self.cfg = cfg
        self.n_tokens, self.d_z, self.cond_dim = n_tokens, d_z, cond_dim
        rng = np.random.default_rng(seed)
        d = cfg.d_model
        P = self.params = nn.ParamStore()
        nn.add_linear(P, rng, "lift", d_z, d)
        P.add("pos", rng.normal(0.0, POS_INIT_STD, (n_tokens, d)))
        blocks.add_mlp(P, rng, "cond", cond_dim, d, d)
        for b in range(cfg.layers):
            # zero-initialized producers: gamma = 1 + 0, beta = 0 at init
            for part in ("gamma", "beta"):
                P.add(f"ada{b}.{part}.weight", np.zeros((d, d)))
                P.add(f"ada{b}.{part}.bias", np.zeros(d))
            blocks.add_attention(P, rng, f"block{b}.attn", d)
            nn.add_norm(P, f"block{b}.ln", d)
            blocks.add_ffn(P, rng, f"block{b}.ffn", d)
        nn.add_linear(P, rng, "head", d, d_z)

    def embed_condition(self, e_norm, t) -> nn.Tensor:
        """``MLP(normalized e) + sinusoidal(t)`` as a ``(B, d_model)`` Tensor."""
        e_norm = np.atleast_2d(np.asarray(e_norm, dtype=np.float64))
        temb = sinusoidal_embedding(t, self.cfg.d_model)
        return nn.add(blocks.mlp(self.params, "cond", e_norm, act=nn.silu), temb)

    def modulation(self, cond, b: int):
        P = self.params
        c = nn.silu(cond)
        gamma = nn.add(nn.linear(c, P[f"ada{b}.gamma.weight"], P[f"ada{b}.gamma.bias"]), 1.0)
        beta = nn.linear(c, P[f"ada{b}.beta.weight"], P[f"ada{b}.beta.bias"])
        return gamma, beta

    def forward(self, z, t, e_norm, training: bool = False, rng: np.random.Generator | None = None) -> nn.Tensor:
        """Velocity ``(B, M, d_z)`` at latents ``z``, times ``t (B,)`` and normalized conditions."""
        P, cfg = self.params, self.cfg
        z = np.asarray(z, dtype=np.float64)
        if z.ndim == 2:
            z = z[None]
        if z.shape[1:] != (self.n_tokens, self.d_z):
            raise ValueError(f"latent {z.shape[1:]} does not match ({self.n_tokens}, {self.d_z})")
        B = z.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
        e_norm = np.broadcast_to(np.atleast_2d(e_norm), (B, self.cond_dim))
        cond = self.embed_condition(e_norm, t)
        h = nn.add(nn.linear(z, P["lift.weight"], P["lift.bias"]), P["pos"])
        p = cfg.dropout
        for b in range(cfg.layers):
            # pre-norm residual block; AdaLN takes the pre-attention norm slot
            gamma, beta = self.modulation(cond, b)
            a = blocks.attention(P, f"block{b}.attn", adaln_modulate(h, gamma, beta), cfg.heads)
            h = nn.add(h, nn.dropout(a, p, rng, training))
            f = blocks.feed_forward(P, f"block{b}.ffn", nn.layer_norm(h, P[f"block{b}.ln.scale"], P[f"block{b}.ln.shift"]))
            h = nn.add(h, nn.dropout(f, p, rng, training))
        return nn.linear(h, P["head.weight"], P["head.bias"])

    def __call__(self, z, t, e_norm):
        return self.forward(z, t, e_norm).data


def cfm_loss(net: VectorFieldNet, z1, e_norm, rng: np.random.Generator, training: bool = True) -> nn.Tensor:
    """Mean squared error between the field at ``z_t`` and ``z1 - z0``.

    ``z0`` and ``t`` are drawn independently per item from ``rng``.
    """
    z1 = np.asarray(z1, dtype=np.float64)
    if len(z1) == 0:
        raise ValueError("empty CFM batch")
    z0 = rng.standard_normal(z1.shape)
    t = rng.random(len(z1))
    noise = rng.standard_normal(z1.shape) if net.cfg.sigma_path else None
    zt = sample_path_point(z0, z1, t, net.cfg.sigma_path, noise)
    pred = net.forward(zt, t, e_norm, training=training, rng=rng)
    return nn.mse_loss(pred, target_velocity(z0, z1))


# ---------------------------------------------------------------------------
# model bundle, training and sampling
# ---------------------------------------------------------------------------

@dataclass
class FlowModel:
    net: VectorFieldNet
    normalizer: ConditionNormalizer
    latent_mean: np.ndarray  # (M, d_z)
    latent_std: np.ndarray
    metadata: dict = field(default_factory=dict)
    unconditional: bool = False  # condition ablation: the field sees a constant zero condition

    def condition(self, e) -> np.ndarray:
        if self.unconditional:
            return np.zeros((1, self.net.cond_dim))
        return self.normalizer(e)

    def save(self, path, metadata=None):
        meta = dict(self.metadata, **(metadata or {}))
        meta.update(
            kind="cfm",
            config=asdict(self.net.cfg),
            n_tokens=self.net.n_tokens,
            d_z=self.net.d_z,
            cond_dim=self.net.cond_dim,
            normalizer=self.normalizer.as_dict(),
            latent_mean=self.latent_mean.tolist(),
            latent_std=self.latent_std.tolist(),
            unconditional=self.unconditional,
        )
        return save_checkpoint(path, store_schema(self.net.params), self.net.params.flat(), meta)

    @classmethod
    def load(cls, path) -> "FlowModel":
        ck = load_checkpoint(path)
        m = ck.metadata
        if m.get("kind") != "cfm":
            raise ValueError(f"{path}: not a CFM checkpoint")
        net = VectorFieldNet(m["n_tokens"], m["d_z"], m["cond_dim"], CfmConfig(**m["config"]))
        net.params.load_flat(ck.payload)
        return cls(net, ConditionNormalizer.from_dict(m["normalizer"]),
                   np.array(m["latent_mean"]), np.array(m["latent_std"]), m, bool(m.get("unconditional", False)))


@dataclass
class CfmTrainResult:
    model: FlowModel
    losses: list = field(default_factory=list)
    val_scores: list = field(default_factory=list)
    best_epoch: int = -1


def train_cfm(latents, normalizer: ConditionNormalizer, cfg: CfmConfig, seed: int,
              validate=None, eval_every: int = 0, unconditional: bool = False) -> CfmTrainResult:
    """Fit the vector field on ``(z1, e)`` pairs.

    ``latents`` are LatentCodes carrying their conditions. With ``validate``
    (a callable mapping a FlowModel to a score, lower is better) the model is
    scored every ``eval_every`` epochs and the best-scoring parameters are
    kept; otherwise the final parameters are returned. ``unconditional``
    replaces every condition by zeros (the condition ablation).
    """
    if len(latents) < 2:
        raise ConfigError("CFM training needs at least 2 latent codes")
    Z = np.stack([lc.z for lc in latents])
    E = normalizer(np.stack([lc.condition for lc in latents]))
    if unconditional:
        E = np.zeros_like(E)
    mean = Z.mean(axis=0)
    std = Z.std(axis=0)
    std = np.where(std > 1e-12, std, 1.0)
    Zs = (Z - mean) / std
    init_seq, train_seq = np.random.SeedSequence(seed).spawn(2)
    net = VectorFieldNet(Z.shape[1], Z.shape[2], E.shape[1], cfg, seed=int(init_seq.generate_state(1)[0]))
    model = FlowModel(net, normalizer, mean, std, {"seed": seed, "n_latents": len(latents)}, unconditional)
    rng = np.random.default_rng(train_seq)
    opt = nn.AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    n = len(Zs)
    per_epoch = -(-n // cfg.batch)
    total = cfg.epochs * per_epoch
    P = net.params
    losses, scores = [], []
    best, best_state, best_epoch = np.inf, P.state(), cfg.epochs - 1
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        run = 0.0
        try:
            for i in range(0, n, cfg.batch):
                idx = np.repeat(order[i:i + cfg.batch], cfg.repeats)
                P.zero_grad()
                loss = cfm_loss(net, Zs[idx], E[idx], rng)
                loss.backward()
                nn.adam_step(P, opt, lr=nn.one_cycle_lr(step, total, cfg.lr))
                step += 1
                run += loss.item() * len(idx)
        except nn.NonFiniteError as exc:
            raise NumericError(f"CFM training diverged at epoch {epoch}: {exc}") from exc
        losses.append(run / (n * cfg.repeats))
        if validate is not None and eval_every and ((epoch + 1) % eval_every == 0 or epoch == cfg.epochs - 1):
            score = float(validate(model))
            scores.append((epoch, score))
            if score < best:
                best, best_state, best_epoch = score, P.state(), epoch
    if validate is not None and eval_every:
        P.load_state(best_state)
    model.metadata.update(best_epoch=best_epoch, final_loss=losses[-1] if losses else None)
    return CfmTrainResult(model, losses, scores, best_epoch)


def euler_flow(field_fn, z0, n_steps: int, record: bool = True):
    """``z_{k+1} = z_k + (1/N) v(z_k, k/N)``; returns ``(z_N, [z_0 .. z_N])``."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    z = np.array(z0, dtype=np.float64)
    path = [z.copy()] if record else []
    h = 1.0 / n_steps
    for k in range(n_steps):
        z = z + h * np.asarray(field_fn(z, k / n_steps))
        if not np.isfinite(z).all():
            raise NumericError(f"flow state became non-finite at step {k + 1}")
        if record:
            path.append(z.copy())
    return z, path


def generate_latent(model: FlowModel, e_new, seed: int, n_steps: int | None = None):
    """Sample one latent for coefficients ``e_new``; returns ``(z, FlowPathRecord)``.

    Both the final latent and the recorded path are on the de-standardized
    latent scale the VAE decoder expects.
    """
    net = model.net
    n_steps = net.cfg.n_steps if n_steps is None else n_steps
    e_new = np.asarray(e_new, dtype=np.float64).ravel()
    e_norm = model.condition(e_new)
    z0 = np.random.default_rng(seed).standard_normal((net.n_tokens, net.d_z))
    _, path = euler_flow(lambda z, t: net(z, t, e_norm)[0], z0, n_steps)
    path = [p * model.latent_std + model.latent_mean for p in path]
    return path[-1], FlowPathRecord(e_new, path)


def generate_forecaster(vae, model: FlowModel, e_new, seed: int, env_id: str = "", n_steps: int | None = None,
                        target_schema=None):
    """Decode a freshly generated latent into a forecaster checkpoint.

    ``target_schema`` is the forecaster schema to tag the result with when
    the VAE works on a different token layout (the flatten ablation).
    """
    from .forecaster import ExpertCheckpoint
    from .tokenizer import detokenize

    z, record = generate_latent(model, e_new, seed, n_steps)
    if z.shape != (vae.schema.n_tokens, vae.cfg.d_z):
        raise ValueError(f"generated latent {z.shape} does not fit the VAE")
    payload = detokenize(vae.decode_latents(z)[0])
    meta = {"generated_for": [float(v) for v in np.ravel(e_new)], "seed": seed}
    schema = vae.schema if target_schema is None else target_schema
    if payload.size != schema.n_values:
        raise ValueError(f"decoded payload has {payload.size} values, schema needs {schema.n_values}")
    return ExpertCheckpoint(env_id, schema, payload, meta), record
