"""Transformer VAE over forecaster weight-token sequences.

Tokens of layer l pass through their own projection MLP f_l to ``d_model``,
get a learned positional embedding per absolute token index, and run through
a post-norm Transformer encoder whose per-token heads give mu and log-variance.
The decoder lifts each latent token back to ``d_model``, adds its own
positional embeddings, runs a mirrored Transformer and projects every token
back to its layer's token dimension through g_l.

Token values are standardized with corpus statistics before embedding,
per element by default or per layer; the statistics travel with the
checkpoint.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .checkpoint import load_checkpoint, save_checkpoint, store_schema
from .dynamics import ConfigError, NumericError
from .nn import blocks
from .tokenizer import SchemaMismatch, TokenSequence, WeightSchema, tokenize_payload, detokenize

log = logging.getLogger(__name__)

LOGVAR_MIN, LOGVAR_MAX = -30.0, 20.0
POS_INIT_STD = 0.02


@dataclass(frozen=True)
class VaeConfig:
    d_model: int = 128
    layers: int = 2
    heads: int = 8
    d_z: int = 32
    beta: float = 1e-6
    lr: float = 1e-4
    weight_decay: float = 3e-9
    batch: int = 32
    epochs: int = 500
    standardize: str = "element"  # or "layer"

    def __post_init__(self):
        if self.standardize not in ("element", "layer"):
            raise ConfigError(f"unknown standardization {self.standardize!r}")
        if self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if self.beta < 0:
            raise ConfigError("beta must be >= 0")
        if min(self.d_model, self.layers, self.heads, self.d_z, self.batch) < 1 or self.epochs < 0:
            raise ConfigError("VAE sizes must be positive")


@dataclass
class LatentPosterior:
    mu: np.ndarray  # (M, d_z)
    logvar: np.ndarray

    def __post_init__(self):
        if self.mu.shape != self.logvar.shape:
            raise ValueError(f"posterior shapes differ: {self.mu.shape} vs {self.logvar.shape}")


@dataclass
class LatentCode:
    z: np.ndarray  # (M, d_z)
    schema: WeightSchema
    condition: np.ndarray | None = None
    env_id: str | None = None

    def __post_init__(self):
        if self.z.shape[0] != self.schema.n_tokens:
            raise SchemaMismatch(f"latent has {self.z.shape[0]} tokens, schema has {self.schema.n_tokens}")
        if not np.isfinite(self.z).all():
            raise NumericError("latent code is not finite")


def recon_mse(recon, original) -> nn.Tensor:
    """Mean squared error over every token value of every layer."""
    sizes = [o.size if isinstance(o, np.ndarray) else o.data.size for o in original]
    total = float(sum(sizes))
    out = None
    for r, o, n in zip(recon, original, sizes):
        term = nn.mul(nn.mse_loss(r, o), n / total)
        out = term if out is None else nn.add(out, term)
    return out


def elbo_loss(original, recon, mu, logvar, beta: float) -> nn.Tensor:
    """Negative ELBO: reconstruction MSE plus ``beta`` times the Gaussian KL."""
    loss = recon_mse(recon, original)
    if beta:
        loss = nn.add(loss, nn.mul(nn.gaussian_kl(mu, logvar), beta))
    return loss


def reparameterize(mu, logvar, noise):
    """``z = mu + exp(logvar / 2) * noise`` on arrays or Tensors."""
    if isinstance(mu, nn.Tensor):
        return nn.add(mu, nn.mul(nn.exp(nn.mul(logvar, 0.5)), noise))
    return mu + np.exp(0.5 * np.asarray(logvar)) * noise


class WeightVAE:
    def __init__(self, schema: WeightSchema, cfg: VaeConfig, seed: int = 0):
        self.schema = schema
        self.cfg = cfg
        # per layer: scalars ("layer") or (count, dim) arrays ("element")
        self.layer_mean = [np.zeros(1) for _ in schema.layers]
        self.layer_std = [np.ones(1) for _ in schema.layers]
        self.metadata: dict = {}
        rng = np.random.default_rng(seed)
        d, M = cfg.d_model, schema.n_tokens
        P = self.params = nn.ParamStore()
        for l in schema.layers:
            blocks.add_mlp(P, rng, f"f{l.index}", l.token_dim, d, d)
        P.add("enc.pos", rng.normal(0.0, POS_INIT_STD, (M, d)))
        for b in range(cfg.layers):
            blocks.add_block(P, rng, f"enc.block{b}", d)
        nn.add_linear(P, rng, "enc.mu", d, cfg.d_z)
        nn.add_linear(P, rng, "enc.logvar", d, cfg.d_z)
        nn.add_linear(P, rng, "dec.lift", cfg.d_z, d)
        P.add("dec.pos", rng.normal(0.0, POS_INIT_STD, (M, d)))
        for b in range(cfg.layers):
            blocks.add_block(P, rng, f"dec.block{b}", d)
        for l in schema.layers:
            blocks.add_mlp(P, rng, f"g{l.index}", d, d, l.token_dim)

    # -- token plumbing ----------------------------------------------------
    def stack(self, seqs) -> list[np.ndarray]:
        """Per-layer ``(B, count, dim)`` arrays of standardized token values."""
        out = []
        for i, layer in enumerate(self.schema.layers):
            blk = np.stack([np.asarray(s.blocks[i], dtype=np.float64) for s in seqs])
            if blk.shape[1:] != (layer.token_count, layer.token_dim):
                raise SchemaMismatch(f"layer {layer.index}: tokens {blk.shape[1:]} do not match the schema")
            out.append((blk - self.layer_mean[i]) / self.layer_std[i])
        return out

    def unstack(self, arrays) -> list[TokenSequence]:
        B = arrays[0].shape[0]
        raw = [a * self.layer_std[i] + self.layer_mean[i] for i, a in enumerate(arrays)]
        return [TokenSequence(self.schema, [r[b].copy() for r in raw]) for b in range(B)]

    def fit_standardization(self, seqs):
        for i in range(len(self.schema.layers)):
            vals = np.stack([np.asarray(s.blocks[i], dtype=np.float64) for s in seqs])
            if self.cfg.standardize == "layer":
                mean, std = np.atleast_1d(vals.mean()), np.atleast_1d(vals.std())
            else:
                mean, std = vals.mean(axis=0), vals.std(axis=0)
            # a value shared by the whole corpus carries no scale
            self.layer_mean[i] = mean
            self.layer_std[i] = np.where(std > 1e-12, std, 1.0)

    # -- networks ----------------------------------------------------------
    def embed(self, layer_tokens) -> nn.Tensor:
        """``(B, M, d_model)`` embeddings from per-layer standardized tokens."""
        P = self.params
        if len(layer_tokens) != len(self.schema.layers):
            raise SchemaMismatch(f"{len(layer_tokens)} token blocks for {len(self.schema.layers)} layers")
        parts = []
        for layer, tok in zip(self.schema.layers, layer_tokens):
            if tok.shape[-1] != layer.token_dim:
                raise SchemaMismatch(f"no projection for token_dim {tok.shape[-1]} at layer {layer.index}")
            parts.append(blocks.mlp(P, f"f{layer.index}", nn.as_tensor(tok)))
        h = parts[0] if len(parts) == 1 else nn.concat(parts, axis=-2)
        return nn.add(h, P["enc.pos"])

    def encode_embeddings(self, h):
        P, cfg = self.params, self.cfg
        if h.shape[-2:] != (self.schema.n_tokens, cfg.d_model):
            raise ValueError(f"embeddings {h.shape} do not match M={self.schema.n_tokens}, d_model={cfg.d_model}")
        for b in range(cfg.layers):
            h = blocks.block(P, f"enc.block{b}", h, cfg.heads)
        mu = nn.linear(h, P["enc.mu.weight"], P["enc.mu.bias"])
        logvar = nn.clip(nn.linear(h, P["enc.logvar.weight"], P["enc.logvar.bias"]), LOGVAR_MIN, LOGVAR_MAX)
        return mu, logvar

    def encode(self, layer_tokens):
        return self.encode_embeddings(self.embed(layer_tokens))

    def decode(self, z) -> list[nn.Tensor]:
        """Per-layer standardized token reconstructions from ``(B, M, d_z)`` latents."""
        P, cfg = self.params, self.cfg
        z = nn.as_tensor(z)
        if z.shape[-2:] != (self.schema.n_tokens, cfg.d_z):
            raise SchemaMismatch(f"latent {z.shape} does not match M={self.schema.n_tokens}, d_z={cfg.d_z}")
        h = nn.add(nn.linear(z, P["dec.lift.weight"], P["dec.lift.bias"]), P["dec.pos"])
        for b in range(cfg.layers):
            h = blocks.block(P, f"dec.block{b}", h, cfg.heads)
        out, off = [], 0
        for layer in self.schema.layers:
            part = nn.slice_axis(h, off, off + layer.token_count, axis=-2)
            off += layer.token_count
            out.append(blocks.mlp(P, f"g{layer.index}", part))
        return out

    # -- array-level helpers -----------------------------------------------
    def posterior(self, seq: TokenSequence) -> LatentPosterior:
        mu, logvar = self.encode(self.stack([seq]))
        return LatentPosterior(mu.data[0], logvar.data[0])

    def encode_mean(self, seqs, chunk: int = 64) -> np.ndarray:
        outs = []
        for i in range(0, len(seqs), chunk):
            mu, _ = self.encode(self.stack(seqs[i:i + chunk]))
            outs.append(mu.data)
        return np.concatenate(outs)

    def decode_latents(self, z) -> list[TokenSequence]:
        z = np.asarray(z, dtype=np.float64)
        if z.ndim == 2:
            z = z[None]
        return self.unstack([t.data for t in self.decode(z)])

    def reconstruct_payload(self, payload) -> np.ndarray:
        seq = tokenize_payload(self.schema, payload)
        return detokenize(self.decode_latents(self.encode_mean([seq]))[0])

    # -- persistence -------------------------------------------------------
    def save(self, path, metadata=None):
        meta = dict(metadata or {})
        meta.update(
            kind="vae",
            config=asdict(self.cfg),
            weight_schema=self.schema.entries(),
            layer_mean=[m.tolist() for m in self.layer_mean],
            layer_std=[v.tolist() for v in self.layer_std],
        )
        return save_checkpoint(path, store_schema(self.params), self.params.flat(), meta)

    @classmethod
    def load(cls, path) -> "WeightVAE":
        ck = load_checkpoint(path)
        if ck.metadata.get("kind") != "vae":
            raise ValueError(f"{path}: not a VAE checkpoint")
        vae = cls(WeightSchema.from_entries(ck.metadata["weight_schema"]), VaeConfig(**ck.metadata["config"]))
        vae.params.load_flat(ck.payload)
        vae.layer_mean = [np.array(m, dtype=np.float64) for m in ck.metadata["layer_mean"]]
        vae.layer_std = [np.array(v, dtype=np.float64) for v in ck.metadata["layer_std"]]
        vae.metadata = ck.metadata
        return vae


@dataclass
class VaeTrainResult:
    vae: WeightVAE
    losses: list = field(default_factory=list)
    best_epoch: int = -1


def _common_schema(experts) -> WeightSchema:
    schema = experts[0].schema
    for e in experts[1:]:
        if e.schema != schema:
            raise SchemaMismatch(f"expert {getattr(e, 'env_id', '?')} has a different weight schema")
    return schema


def train_vae(experts, cfg: VaeConfig, seed: int, schema: WeightSchema | None = None) -> VaeTrainResult:
    """Fit the VAE on a corpus of expert checkpoints sharing one schema.

    ``schema`` overrides the experts' own token schema (the flatten
    ablation passes a flat schema here). The parameters of the epoch with
    the lowest corpus reconstruction error (posterior means, no sampling)
    are kept.
    """
    if len(experts) < 2:
        raise ConfigError("VAE training needs at least 2 experts")
    own = _common_schema(experts)
    schema = own if schema is None else schema
    init_seq, noise_seq = np.random.SeedSequence(seed).spawn(2)
    vae = WeightVAE(schema, cfg, seed=int(init_seq.generate_state(1)[0]))
    seqs = [tokenize_payload(schema, e.payload) for e in experts]
    vae.fit_standardization(seqs)
    data = vae.stack(seqs)
    rng = np.random.default_rng(noise_seq)
    opt = nn.AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    n = len(seqs)
    per_epoch = -(-n // cfg.batch)
    total = cfg.epochs * per_epoch
    P = vae.params
    best, best_state, best_epoch, losses = np.inf, P.state(), -1, []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        try:
            for i in range(0, n, cfg.batch):
                idx = order[i:i + cfg.batch]
                batch = [d[idx] for d in data]
                P.zero_grad()
                mu, logvar = vae.encode(batch)
                z = reparameterize(mu, logvar, rng.standard_normal(mu.shape))
                loss = elbo_loss(batch, vae.decode(z), mu, logvar, cfg.beta)
                loss.backward()
                nn.adam_step(P, opt, lr=nn.one_cycle_lr(step, total, cfg.lr))
                step += 1
            mu, _ = vae.encode(data)
            full = float(recon_mse(vae.decode(mu.data), data).data)
        except nn.NonFiniteError as exc:
            raise NumericError(f"VAE training diverged at epoch {epoch}: {exc}") from exc
        losses.append(full)
        if full < best:
            best, best_state, best_epoch = full, P.state(), epoch
    P.load_state(best_state)
    vae.metadata = {"beta": cfg.beta, "seed": seed, "best_epoch": best_epoch, "recon_mse": best,
                    "n_experts": n}
    log.info("VAE: best standardized recon MSE %.3e at epoch %d", best, best_epoch)
    return VaeTrainResult(vae, losses, best_epoch)


def encode_corpus(vae: WeightVAE, experts, conditions=None) -> list[LatentCode]:
    """Posterior-mean latents for every expert, paired with its coefficients."""
    seqs = [tokenize_payload(vae.schema, e.payload) for e in experts]
    mus = vae.encode_mean(seqs)
    conds = [None] * len(experts) if conditions is None else conditions
    return [LatentCode(mu, vae.schema, None if c is None else np.asarray(c, dtype=np.float64),
                       getattr(e, "env_id", None))
            for mu, e, c in zip(mus, experts, conds)]
