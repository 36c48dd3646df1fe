"""Spatio-temporal graph convolutional forecaster and per-environment expert training."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .checkpoint import load_checkpoint, save_checkpoint
from .dynamics import NumericError, Trajectory
from .graphs import Graph
from .tokenizer import WeightSchema, derive_schema

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ForecasterConfig:
    H: int = 50
    N: int = 50
    channels: int = 8
    k_t: int = 3
    blocks: int = 2

    def __post_init__(self):
        if self.H < self.blocks * 2 * (self.k_t - 1) + 1:
            raise ValueError(f"H={self.H} too short for {self.blocks} blocks with k_t={self.k_t}")
        if self.N < 1:
            raise ValueError("N must be >= 1")

    @property
    def remaining_time(self) -> int:
        return self.H - self.blocks * 2 * (self.k_t - 1)


@dataclass(frozen=True)
class ExpertTrainConfig:
    epochs: int = 500
    batch: int = 64
    lr: float = 1e-4
    weight_decay: float = 0.0
    schedule: str = "onecycle"  # or "constant"
    stride: int = 1  # spacing between training window starts

    def __post_init__(self):
        if self.schedule not in ("onecycle", "constant"):
            raise ValueError(f"unknown lr schedule {self.schedule!r}")
        if min(self.epochs, self.batch, self.stride) < 1 or self.lr <= 0:
            raise ValueError("expert training sizes and lr must be positive")


@dataclass
class ExpertCheckpoint:
    env_id: str
    schema: WeightSchema
    payload: np.ndarray
    metadata: dict = field(default_factory=dict)

    def save(self, path):
        meta = dict(self.metadata, env_id=self.env_id)
        return save_checkpoint(path, self.schema.entries(), self.payload, meta)

    @classmethod
    def load(cls, path) -> "ExpertCheckpoint":
        ck = load_checkpoint(path)
        return cls(ck.metadata.get("env_id", ""), WeightSchema.from_entries(ck.schema), ck.payload, ck.metadata)


def layer_table(cfg: ForecasterConfig) -> list[tuple[str, str, tuple]]:
    c, k = cfg.channels, cfg.k_t
    rows = []
    cin = 1
    for b in range(cfg.blocks):
        rows += [
            (f"block{b}.tconv_glu", "conv", (2 * c, cin, k, 1)),
            (f"block{b}.graph", "linear", (c, c)),
            (f"block{b}.tconv", "conv", (c, c, k, 1)),
            (f"block{b}.norm", "norm_affine", (c,)),
        ]
        cin = c
    rows += [
        ("out.tconv", "conv", (c, c, cfg.remaining_time, 1)),
        ("head", "linear", (cfg.N, c)),
    ]
    return rows


def init_params(cfg: ForecasterConfig, seed: int) -> nn.ParamStore:
    rng = np.random.default_rng(seed)
    store = nn.ParamStore()
    for name, kind, shape in layer_table(cfg):
        if kind == "conv":
            store.add(name, nn.glorot(rng, shape))
        elif kind == "linear":
            nn.add_linear(store, rng, name, shape[1], shape[0])
        else:
            nn.add_norm(store, name, shape[0])
    return store


def params_from_payload(cfg: ForecasterConfig, payload) -> nn.ParamStore:
    store = init_params(cfg, 0)
    store.load_flat(payload)
    return store


def forecaster_forward(P: nn.ParamStore, inputs, A_hat, cfg: ForecasterConfig) -> nn.Tensor:
    """Map standardized windows ``(B, H, n)`` to standardized forecasts ``(B, N, n)``.

    ``(H, n)`` and ``(H, n, 1)`` inputs are treated as a batch of one.
    """
    x = np.asarray(inputs.data if isinstance(inputs, nn.Tensor) else inputs, dtype=np.float64)
    if x.ndim == 3 and x.shape[-1] == 1 and x.shape[1] == A_hat.shape[0] and x.shape[0] == cfg.H:
        x = x[None, ..., 0]
    elif x.ndim == 2:
        x = x[None]
    B, H, n = x.shape
    if H != cfg.H or n != A_hat.shape[0]:
        raise ValueError(f"input window {x.shape[1:]} does not match H={cfg.H}, n={A_hat.shape[0]}")
    h = nn.Tensor(np.ascontiguousarray(x.transpose(0, 2, 1))[..., None])  # (B, n, H, 1)
    for b in range(cfg.blocks):
        h = nn.temporal_conv1d(h, P[f"block{b}.tconv_glu"], glu=True)
        # the skip keeps each node's own signal, which A_hat dilutes at hubs
        gc = nn.graph_conv(h, P[f"block{b}.graph.weight"], A_hat, P[f"block{b}.graph.bias"], node_axis=1)
        h = nn.relu(nn.add(gc, h))
        h = nn.temporal_conv1d(h, P[f"block{b}.tconv"])
        h = nn.layer_norm(h, P[f"block{b}.norm.scale"], P[f"block{b}.norm.shift"])
    h = nn.temporal_conv1d(h, P["out.tconv"])  # (B, n, 1, c)
    h = nn.reshape(h, (B, n, cfg.channels))
    y = nn.linear(h, P["head.weight"], P["head.bias"])  # (B, n, N)
    return nn.transpose(y, (0, 2, 1))


# ---------------------------------------------------------------------------
# windows and metrics
# ---------------------------------------------------------------------------

def window_starts(T: int, H: int, N: int, train_steps: int | None = None, portion: str = "all",
                  stride: int = 1) -> np.ndarray:
    """Last observed index ``t`` of every window.

    ``train`` windows end their targets before ``train_steps``; ``eval``
    windows start their targets at or after it.
    """
    if T < H + N:
        raise ValueError(f"trajectory of length {T} is too short: need at least H + N = {H + N}")
    lo, hi = H - 1, T - N - 1
    if portion == "train":
        hi = min(hi, train_steps - 1 - N)
    elif portion == "eval":
        lo = max(lo, train_steps - 1)
    elif portion != "all":
        raise ValueError(f"unknown window portion {portion!r}")
    if hi < lo:
        raise ValueError(f"no {portion} windows for T={T}, H={H}, N={N}, train_steps={train_steps}")
    return np.arange(lo, hi + 1, stride)


def make_windows(traj: Trajectory, H: int, N: int, stride: int = 1, portion: str = "all",
                 standardized: bool = True):
    """Stacked ``(inputs (W, H, n), targets (W, N, n))`` window pairs."""
    x = traj.states[..., 0]
    if standardized:
        x = traj.standardize(x)
    starts = window_starts(traj.T, H, N, traj.train_steps, portion, stride)
    idx_in = starts[:, None] + np.arange(-H + 1, 1)[None, :]
    idx_out = starts[:, None] + np.arange(1, N + 1)[None, :]
    return x[idx_in], x[idx_out]


def persistence_baseline(inputs, N: int) -> np.ndarray:
    """Repeat the last observed frame ``N`` times along the time axis."""
    inputs = np.asarray(inputs)
    last = inputs[..., -1:, :] if inputs.ndim >= 2 else inputs[-1:]
    reps = [1] * last.ndim
    reps[-2 if inputs.ndim >= 2 else 0] = N
    return np.tile(last, reps)


def rmse(pred, target) -> float:
    d = np.asarray(pred) - np.asarray(target)
    return float(np.sqrt(np.mean(d * d)))


def predict(P: nn.ParamStore, inputs, A_hat, cfg: ForecasterConfig, chunk: int = 256) -> np.ndarray:
    outs = [forecaster_forward(P, inputs[i:i + chunk], A_hat, cfg).data for i in range(0, len(inputs), chunk)]
    return np.concatenate(outs, axis=0)


def evaluate_rmse(params, traj: Trajectory, g: Graph, cfg: ForecasterConfig, portion: str = "all") -> float:
    """RMSE on de-standardized forecasts against raw targets."""
    P = params if isinstance(params, nn.ParamStore) else params_from_payload(cfg, params)
    xin, _ = make_windows(traj, cfg.H, cfg.N, portion=portion)
    _, raw_target = make_windows(traj, cfg.H, cfg.N, portion=portion, standardized=False)
    pred = traj.destandardize(predict(P, xin, g.normalized_adjacency(), cfg))
    return rmse(pred, raw_target)


def persistence_rmse(traj: Trajectory, cfg: ForecasterConfig, portion: str = "all") -> float:
    xin, target = make_windows(traj, cfg.H, cfg.N, portion=portion, standardized=False)
    return rmse(persistence_baseline(xin, cfg.N), target)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _loss(P, xin, target, A_hat, cfg):
    return nn.mse_loss(forecaster_forward(P, xin, A_hat, cfg), target)


def train_expert(traj: Trajectory, g: Graph, cfg: ForecasterConfig, seed: int,
                 train_cfg: ExpertTrainConfig = ExpertTrainConfig(), init_seed: int | None = None,
                 portion: str = "all") -> ExpertCheckpoint:
    """Fit a forecaster to one environment's windows.

    ``init_seed`` fixes the initial weights (defaults to ``seed``); ``seed``
    drives minibatch order. The parameters of the epoch with the lowest
    full-data training loss are returned.
    """
    init_seed = seed if init_seed is None else init_seed
    P = init_params(cfg, init_seed)
    xin, target = make_windows(traj, cfg.H, cfg.N, stride=train_cfg.stride, portion=portion)
    A_hat = g.normalized_adjacency()
    rng = np.random.default_rng(seed)
    opt = nn.AdamState(lr=train_cfg.lr, weight_decay=train_cfg.weight_decay)
    W = len(xin)
    per_epoch = -(-W // train_cfg.batch)
    total = train_cfg.epochs * per_epoch
    best_loss, best_state, best_epoch = np.inf, P.state(), -1
    step = 0
    for epoch in range(train_cfg.epochs):
        order = rng.permutation(W)
        try:
            for i in range(0, W, train_cfg.batch):
                idx = order[i:i + train_cfg.batch]
                P.zero_grad()
                loss = _loss(P, xin[idx], target[idx], A_hat, cfg)
                loss.backward()
                lr = (nn.one_cycle_lr(step, total, train_cfg.lr) if train_cfg.schedule == "onecycle"
                      else train_cfg.lr)
                nn.adam_step(P, opt, lr=lr)
                step += 1
            full = float(nn.mse_loss(predict(P, xin, A_hat, cfg), target).data)
        except nn.NonFiniteError as exc:
            raise NumericError(f"{traj.env_id}: training diverged at epoch {epoch}: {exc}") from exc
        if not np.isfinite(full):
            raise NumericError(f"{traj.env_id}: training diverged at epoch {epoch}")
        if full < best_loss:
            best_loss, best_state, best_epoch = full, P.state(), epoch
    P.load_state(best_state)
    meta = {
        "final_train_loss": best_loss,
        "best_epoch": best_epoch,
        "seed": seed,
        "init_seed": init_seed,
        "epochs": train_cfg.epochs,
        "forecaster": asdict(cfg),
        "train": asdict(train_cfg),
    }
    return ExpertCheckpoint(traj.env_id, derive_schema(cfg), P.flat(), meta)
