"""Conditional MLP for velocity or noise prediction, with exact gradients.

The network maps (point, time, condition) to a vector of the point's
dimension.  Its input is the concatenation of the point, a sinusoidal time
embedding, and a condition embedding; the condition embedding is one row of
a learned table (row 0 = null, rows 1..k = classes) plus an optional tight
branch ``scale * gain * W_p @ standardize(anchor)``.  Backpropagation is
written out by hand so gradients are exact and testable against finite
differences.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .dataset import Condition, GmmSpec, sample_posterior_arrays
from .errors import CheckpointError, ObjectiveError
from .numerics import RngStream, require_finite

OBJECTIVES = ("flow_matching", "epsilon_prediction")

CHECKPOINT_MAGIC = b"IVLB"
CHECKPOINT_VERSION = 1

# Tensor declaration order; checkpoints and the optimizer iterate this.
PARAM_FIELDS = ("W1", "b1", "W2", "b2", "W3", "b3", "embed", "W_p", "tight_gain")


def time_embedding(t, n_features: int = 16, max_freq: float = 1000.0) -> np.ndarray:
    """Sinusoidal features of scalar time: sin block then cos block.

    Frequencies are geometric from 1 to ``max_freq``; outputs lie in [-1, 1].
    """
    t = np.asarray(t, dtype=np.float64)
    freqs = np.geomspace(1.0, max_freq, n_features // 2)
    ang = t[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def _silu(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    sig = 1.0 / (1.0 + np.exp(-z))
    return z * sig, sig


def _silu_grad(z: np.ndarray, sig: np.ndarray) -> np.ndarray:
    return sig * (1.0 + z * (1.0 - sig))


@dataclass
class CondBatch:
    """Vectorized conditions: one embedding row, anchor, and scale per sample."""

    rows: np.ndarray
    anchors: np.ndarray
    scales: np.ndarray

    @staticmethod
    def from_condition(cond: Condition, n: int, dim: int) -> "CondBatch":
        rows = np.full(n, cond.class_row, dtype=np.int64)
        anchors = np.zeros((n, dim))
        scales = np.zeros(n)
        if cond.anchor is not None:
            anchors[:] = cond.anchor
            scales[:] = cond.scale
        return CondBatch(rows, anchors, scales)

    @staticmethod
    def from_anchor_rows(rows, anchors, scales) -> "CondBatch":
        return CondBatch(np.asarray(rows, dtype=np.int64),
                         np.asarray(anchors, dtype=np.float64),
                         np.asarray(scales, dtype=np.float64))

    @staticmethod
    def from_list(conds: list[Condition], dim: int) -> "CondBatch":
        n = len(conds)
        rows = np.zeros(n, dtype=np.int64)
        anchors = np.zeros((n, dim))
        scales = np.zeros(n)
        for i, c in enumerate(conds):
            rows[i] = c.class_row
            if c.anchor is not None:
                anchors[i] = c.anchor
                scales[i] = c.scale
        return CondBatch(rows, anchors, scales)

    def as_null(self) -> "CondBatch":
        return CondBatch(np.zeros_like(self.rows), np.zeros_like(self.anchors),
                         np.zeros_like(self.scales))

    @property
    def is_null(self) -> bool:
        return bool(np.all(self.rows == 0) and np.all(self.scales == 0.0))

    def __len__(self) -> int:
        return self.rows.shape[0]


@dataclass
class ModelParams:
    """All learnable tensors plus the metadata needed to use them.

    ``anchor_mean``/``anchor_std`` standardize tight anchors before the
    projection; ``dataset`` keeps the generating mixture so checkpoints are
    self-describing.
    """

    objective: str
    dim: int
    time_features: int
    embed_width: int
    hidden: tuple[int, int]
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    b3: np.ndarray
    embed: np.ndarray
    W_p: np.ndarray
    tight_gain: np.ndarray
    anchor_mean: np.ndarray
    anchor_std: np.ndarray
    dataset: dict = field(default_factory=dict)

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_FIELDS}

    def copy(self) -> "ModelParams":
        kw = asdict(self)
        for name in PARAM_FIELDS + ("anchor_mean", "anchor_std"):
            kw[name] = getattr(self, name).copy()
        kw["hidden"] = tuple(self.hidden)
        return ModelParams(**kw)

    def predict(self, x, t, cond) -> np.ndarray:
        """Model output for a single point (d,) or a batch (n, d)."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        xb = x[None, :] if single else x
        if xb.shape[1] != self.dim:
            raise ValueError(f"expected points of dimension {self.dim}, got {xb.shape[1]}")
        tb = np.broadcast_to(np.asarray(t, dtype=np.float64), (xb.shape[0],))
        if isinstance(cond, Condition):
            cond = CondBatch.from_condition(cond, xb.shape[0], self.dim)
        out = forward_batch(self, xb, tb, cond)
        return out[0] if single else out


def require_objective(model, expected: str) -> None:
    got = getattr(model, "objective", None)
    if got != expected:
        raise ObjectiveError(f"model objective {got!r} cannot drive a {expected!r} sampler")


def init_params(objective: str, spec: GmmSpec, rng: RngStream, *,
                embed_width: int = 16, hidden: tuple[int, int] = (128, 128),
                time_features: int = 16, zero_final: bool = True) -> ModelParams:
    """Seeded initialization: He-scaled trunk, zeroed output layer by default."""
    if objective not in OBJECTIVES:
        raise ValueError(f"unknown objective {objective!r}")
    d = spec.dim
    in_dim = d + time_features + embed_width
    h1, h2 = hidden
    w_rng = rng.child("weights")

    def dense(fan_in, fan_out):
        return w_rng.normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)

    W1 = dense(in_dim, h1)
    W2 = dense(h1, h2)
    W3 = np.zeros((h2, d)) if zero_final else dense(h2, d)
    embed = w_rng.normal((spec.n_components + 1, embed_width)) * 0.5
    W_p = w_rng.normal((embed_width, d)) * (0.5 / np.sqrt(d))
    return ModelParams(
        objective=objective, dim=d, time_features=time_features,
        embed_width=embed_width, hidden=(h1, h2),
        W1=W1, b1=np.zeros(h1), W2=W2, b2=np.zeros(h2), W3=W3, b3=np.zeros(d),
        embed=embed, W_p=W_p, tight_gain=np.array(1.0),
        anchor_mean=spec.mixture_mean(), anchor_std=spec.mixture_std(),
        dataset=spec.to_dict(),
    )


def embedding_input(params: ModelParams, cond: CondBatch) -> np.ndarray:
    """Condition embedding rows fed to the trunk: table row + tight branch."""
    e, _, _ = _embed(params, cond)
    return e


def _embed(params: ModelParams, cond: CondBatch):
    a_std = (cond.anchors - params.anchor_mean) / params.anchor_std
    proj = a_std @ params.W_p.T
    e = params.embed[cond.rows] + (cond.scales * params.tight_gain)[:, None] * proj
    return e, a_std, proj


def _forward_cached(params: ModelParams, x: np.ndarray, t: np.ndarray, cond: CondBatch):
    e, a_std, proj = _embed(params, cond)
    temb = time_embedding(t, params.time_features)
    u = np.concatenate([x, temb, e], axis=1)
    z1 = u @ params.W1 + params.b1
    h1, sig1 = _silu(z1)
    z2 = h1 @ params.W2 + params.b2
    h2, sig2 = _silu(z2)
    out = h2 @ params.W3 + params.b3
    return out, (a_std, proj, u, z1, sig1, h1, z2, sig2, h2)


def forward_batch(params: ModelParams, x: np.ndarray, t: np.ndarray,
                  cond: CondBatch) -> np.ndarray:
    out, _ = _forward_cached(params, x, t, cond)
    return out


def forward(params: ModelParams, x, t, cond: Condition) -> np.ndarray:
    """Single-point forward pass; see :meth:`ModelParams.predict`."""
    return params.predict(x, t, cond)


@dataclass
class TrainBatch:
    """Raw training pairs; the loss assembles interpolants internally.

    Flow matching: ``x0`` is a prior draw, ``x1_or_eps`` the data point,
    ``t`` in [0, 1].  Epsilon prediction: ``x0`` is the data point,
    ``x1_or_eps`` the true noise, ``t`` the normalized step time, and
    ``alpha_bar`` the schedule value at the drawn step.
    """

    x0: np.ndarray
    x1_or_eps: np.ndarray
    t: np.ndarray
    cond: CondBatch
    alpha_bar: np.ndarray | None = None

    def __len__(self) -> int:
        return self.x0.shape[0]


def loss_and_grad(params: ModelParams, batch: TrainBatch,
                  objective: str | None = None) -> tuple[float, dict[str, np.ndarray]]:
    """Mean squared regression loss (per-sample squared L2) and exact gradients."""
    objective = params.objective if objective is None else objective
    if objective != params.objective:
        raise ObjectiveError(
            f"batch objective {objective!r} does not match model objective {params.objective!r}")
    n = len(batch)
    if n == 0:
        raise ValueError("batch must be non-empty")

    if objective == "flow_matching":
        tt = batch.t[:, None]
        xt = (1.0 - tt) * batch.x0 + tt * batch.x1_or_eps
        target = batch.x1_or_eps - batch.x0
    else:
        if batch.alpha_bar is None:
            raise ValueError("epsilon-prediction batches need alpha_bar values")
        ab = batch.alpha_bar[:, None]
        xt = np.sqrt(ab) * batch.x0 + np.sqrt(1.0 - ab) * batch.x1_or_eps
        target = batch.x1_or_eps

    out, cache = _forward_cached(params, xt, batch.t, batch.cond)
    a_std, proj, u, z1, sig1, h1, z2, sig2, h2 = cache

    r = out - target
    loss = float(np.sum(r * r) / n)

    dout = (2.0 / n) * r
    gW3 = h2.T @ dout
    gb3 = dout.sum(axis=0)
    dh2 = dout @ params.W3.T
    dz2 = dh2 * _silu_grad(z2, sig2)
    gW2 = h1.T @ dz2
    gb2 = dz2.sum(axis=0)
    dh1 = dz2 @ params.W2.T
    dz1 = dh1 * _silu_grad(z1, sig1)
    gW1 = u.T @ dz1
    gb1 = dz1.sum(axis=0)
    du = dz1 @ params.W1.T

    de = du[:, params.dim + params.time_features:]
    g_embed = np.zeros_like(params.embed)
    np.add.at(g_embed, batch.cond.rows, de)
    sg = batch.cond.scales * float(params.tight_gain)
    dproj = de * sg[:, None]
    gW_p = dproj.T @ a_std
    g_gain = np.array(np.sum(batch.cond.scales * np.einsum("ne,ne->n", de, proj)))

    grads = {"W1": gW1, "b1": gb1, "W2": gW2, "b2": gb2, "W3": gW3, "b3": gb3,
             "embed": g_embed, "W_p": gW_p, "tight_gain": g_gain}
    return loss, grads


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @staticmethod
    def for_params(params: ModelParams) -> "AdamState":
        return AdamState(
            m={k: np.zeros_like(t) for k, t in params.tensors().items()},
            v={k: np.zeros_like(t) for k, t in params.tensors().items()},
        )


ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def adam_step(params: ModelParams, grads: dict[str, np.ndarray],
              state: AdamState, lr: float) -> tuple[ModelParams, AdamState]:
    """One bias-corrected Adam update, applied in place."""
    state.step += 1
    t = state.step
    c1 = 1.0 - ADAM_BETA1**t
    c2 = 1.0 - ADAM_BETA2**t
    for name in PARAM_FIELDS:
        g = grads[name]
        p = getattr(params, name)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
    return params, state


@dataclass
class TrainConfig:
    objective: str = "flow_matching"
    batch_size: int = 256
    steps: int = 20000
    lr: float = 1e-3
    p_null: float = 0.5
    p_class: float = 0.25
    p_tight: float = 0.25
    s_train_min: float = 0.0
    s_train_max: float = 1.0
    train_set_size: int = 50000
    seed: int = 0
    # Epsilon-prediction only: schedule the noising steps are drawn from.
    diffusion_steps: int = 100
    beta_min: float = 1e-3
    beta_max: float = 0.14
    embed_width: int = 16
    hidden: tuple[int, int] = (128, 128)
    time_features: int = 16

    def __post_init__(self):
        probs = (self.p_null, self.p_class, self.p_tight)
        if any(p < 0 for p in probs) or abs(sum(probs) - 1.0) > 1e-12:
            raise ValueError("condition-dropout probabilities must be >= 0 and sum to 1")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        d = dict(d)
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        return TrainConfig(**d)


def draw_condition_modes(rng: RngStream, probs, n: int) -> np.ndarray:
    """0 = null, 1 = class, 2 = tight, drawn with the configured probabilities."""
    p_null, p_class, _ = probs
    u = rng.uniform(n)
    return (u >= p_null).astype(np.int64) + (u >= p_null + p_class).astype(np.int64)


def make_train_batch(config: TrainConfig, params: ModelParams, x_data: np.ndarray,
                     labels: np.ndarray, rng: RngStream,
                     alpha_bars: np.ndarray | None) -> TrainBatch:
    """Draw one training batch; the rng call order is fixed for reproducibility."""
    n = config.batch_size
    idx = rng.integers(n, x_data.shape[0])
    x1 = x_data[idx]
    lab = labels[idx]
    modes = draw_condition_modes(rng, (config.p_null, config.p_class, config.p_tight), n)
    s = config.s_train_min + (config.s_train_max - config.s_train_min) * rng.uniform(n)
    rows = np.where(modes == 1, lab, 0)
    tight = modes == 2
    anchors = np.where(tight[:, None], x1, 0.0)
    scales = np.where(tight, s, 0.0)
    cond = CondBatch.from_anchor_rows(rows, anchors, scales)

    if config.objective == "flow_matching":
        x0 = rng.normal((n, params.dim))
        t = rng.uniform(n)
        return TrainBatch(x0=x0, x1_or_eps=x1, t=t, cond=cond)
    eps = rng.normal((n, params.dim))
    t_idx = 1 + rng.integers(n, config.diffusion_steps)
    t = t_idx / config.diffusion_steps
    return TrainBatch(x0=x1, x1_or_eps=eps, t=t, cond=cond, alpha_bar=alpha_bars[t_idx])


def train_model(config: TrainConfig, spec: GmmSpec, *,
                log_every: int = 200,
                progress: bool = False) -> tuple[ModelParams, AdamState, list[tuple[int, float]]]:
    """Train from scratch; returns params, optimizer state, and a loss history."""
    root = RngStream(config.seed)
    x_data, labels = sample_posterior_arrays(spec, root.child("train-data"), config.train_set_size)
    params = init_params(config.objective, spec, root.child("init"),
                         embed_width=config.embed_width, hidden=config.hidden,
                         time_features=config.time_features)
    state = AdamState.for_params(params)
    loop_rng = root.child("train-loop")

    alpha_bars = None
    if config.objective == "epsilon_prediction":
        betas = (np.linspace(config.beta_min, config.beta_max, config.diffusion_steps)
                 if config.diffusion_steps > 1 else np.array([config.beta_min]))
        alpha_bars = np.concatenate([[1.0], np.cumprod(1.0 - betas)])

    history: list[tuple[int, float]] = []
    for step in range(config.steps):
        batch = make_train_batch(config, params, x_data, labels, loop_rng, alpha_bars)
        loss, grads = loss_and_grad(params, batch)
        adam_step(params, grads, state, config.lr)
        if step % log_every == 0 or step == config.steps - 1:
            history.append((step, loss))
            if progress:
                print(f"step {step:6d}  loss {loss:.6f}")
    for tensor in params.tensors().values():
        require_finite(tensor, "trained parameter")
    return params, state, history


class CallableModel:
    """Adapter exposing an analytic field as a model (for tests and oracles).

    ``fn(x, t)`` receives a batch (n, d) and broadcast times (n,); the
    condition is ignored.
    """

    def __init__(self, fn, objective: str, dim: int = 2):
        self.fn = fn
        self.objective = objective
        self.dim = dim

    def predict(self, x, t, cond=None) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        xb = x[None, :] if single else x
        tb = np.broadcast_to(np.asarray(t, dtype=np.float64), (xb.shape[0],))
        out = np.asarray(self.fn(xb, tb), dtype=np.float64)
        return out[0] if single else out


def _tensor_manifest(params: ModelParams, state: AdamState | None) -> list:
    manifest = [[name, list(getattr(params, name).shape)] for name in PARAM_FIELDS]
    if state is not None:
        manifest += [[f"adam_m.{n}", list(state.m[n].shape)] for n in PARAM_FIELDS]
        manifest += [[f"adam_v.{n}", list(state.v[n].shape)] for n in PARAM_FIELDS]
    return manifest


def save_checkpoint(params: ModelParams, state: AdamState | None,
                    config: TrainConfig | None, path) -> None:
    """Self-describing binary: magic, version, JSON header, little-endian f64 tensors."""
    meta = {
        "objective": params.objective,
        "dim": params.dim,
        "time_features": params.time_features,
        "embed_width": params.embed_width,
        "hidden": list(params.hidden),
        "anchor_mean": params.anchor_mean.tolist(),
        "anchor_std": params.anchor_std.tolist(),
        "dataset": params.dataset,
        "train_config": config.to_dict() if config is not None else None,
        "optimizer_step": None if state is None else state.step,
        "tensors": _tensor_manifest(params, state),
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    path = Path(path)
    with path.open("wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for name in PARAM_FIELDS:
            f.write(np.ascontiguousarray(getattr(params, name), dtype="<f8").tobytes())
        if state is not None:
            for name in PARAM_FIELDS:
                f.write(np.ascontiguousarray(state.m[name], dtype="<f8").tobytes())
            for name in PARAM_FIELDS:
                f.write(np.ascontiguousarray(state.v[name], dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ModelParams, AdamState | None, dict]:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 16 or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not an invlab checkpoint (bad magic)")
    (version,) = struct.unpack("<I", data[4:8])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<Q", data[8:16])
    try:
        meta = json.loads(data[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint header: {exc}") from exc

    offset = 16 + hlen
    tensors: dict[str, np.ndarray] = {}
    for name, shape in meta["tensors"]:
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(data):
            raise CheckpointError(f"{path}: truncated tensor data at {name!r}")
        arr = np.frombuffer(data[offset:offset + nbytes], dtype="<f8").astype(np.float64)
        tensors[name] = arr.reshape(shape) if shape else np.array(arr[0])
        offset += nbytes

    d, tf, ew = meta["dim"], meta["time_features"], meta["embed_width"]
    h1, h2 = meta["hidden"]
    expected = {"W1": (d + tf + ew, h1), "b1": (h1,), "W2": (h1, h2), "b2": (h2,),
                "W3": (h2, d), "b3": (d,), "W_p": (ew, d), "tight_gain": ()}
    for name, shape in expected.items():
        if name not in tensors:
            raise CheckpointError(f"{path}: missing tensor {name!r}")
        if tensors[name].shape != shape:
            raise CheckpointError(
                f"{path}: tensor {name!r} has shape {tensors[name].shape}, expected {shape}")
    if "embed" not in tensors or tensors["embed"].shape[1] != ew:
        raise CheckpointError(f"{path}: embedding table width mismatch")

    params = ModelParams(
        objective=meta["objective"], dim=d, time_features=tf, embed_width=ew,
        hidden=(h1, h2),
        **{name: tensors[name] for name in PARAM_FIELDS},
        anchor_mean=np.asarray(meta["anchor_mean"], dtype=np.float64),
        anchor_std=np.asarray(meta["anchor_std"], dtype=np.float64),
        dataset=meta.get("dataset") or {},
    )
    state = None
    if meta.get("optimizer_step") is not None:
        state = AdamState(
            m={n: tensors[f"adam_m.{n}"] for n in PARAM_FIELDS},
            v={n: tensors[f"adam_v.{n}"] for n in PARAM_FIELDS},
            step=int(meta["optimizer_step"]),
        )
    return params, state, meta
