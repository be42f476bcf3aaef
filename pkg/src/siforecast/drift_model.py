"""Fully connected drift network with hand-written backprop, and its training loop.

The network maps ``[x, x0, s]`` (width ``2d + 1``) to a drift in ``R^d``.
Training minimises the interpolant square loss with AdamW (decoupled weight
decay) and a per-epoch cosine learning-rate decay to zero.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .datasets import TransitionDataset
from .errors import DomainError, NumericalError
from .interpolant import _stack_batch, empirical_loss, interpolate
from .schedules import Schedule, ScheduleKind

log = logging.getLogger(__name__)

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def _silu(a):
    return a * _sigmoid(a)


def _silu_grad(a):
    sg = _sigmoid(a)
    return sg * (1.0 + a * (1.0 - sg))


def _gelu(a):
    return 0.5 * a * (1.0 + np.tanh(_SQRT_2_OVER_PI * (a + 0.044715 * a**3)))


def _gelu_grad(a):
    t = np.tanh(_SQRT_2_OVER_PI * (a + 0.044715 * a**3))
    dt = (1.0 - t * t) * _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * a * a)
    return 0.5 * (1.0 + t) + 0.5 * a * dt


def _tanh_grad(a):
    t = np.tanh(a)
    return 1.0 - t * t


# name -> (checkpoint id, f, f')
ACTIVATIONS = {
    "silu": (1, _silu, _silu_grad),
    "gelu": (2, _gelu, _gelu_grad),
    "tanh": (3, np.tanh, _tanh_grad),
}
_ACTIVATION_BY_ID = {v[0]: k for k, v in ACTIVATIONS.items()}


class NeuralDrift:
    """MLP drift ``b_hat_s(x, x0)``.

    ``params`` is a list ``[W0, b0, W1, b1, ...]`` with ``W_l`` of shape
    ``(widths[l], widths[l+1])``.
    """

    def __init__(self, widths, activation="silu", params=None):
        widths = [int(w) for w in widths]
        if len(widths) < 2 or min(widths) < 1:
            raise DomainError(f"bad layer widths {widths}")
        if (widths[0] - 1) % 2 or (widths[0] - 1) // 2 != widths[-1]:
            raise DomainError("input width must be 2*d + 1 for output width d")
        if activation not in ACTIVATIONS:
            raise DomainError(f"unknown activation {activation!r}")
        self.widths = widths
        self.activation = activation
        if params is None:
            params = [
                a for w_in, w_out in zip(widths[:-1], widths[1:])
                for a in (np.zeros((w_in, w_out)), np.zeros(w_out))
            ]
        self.params = [np.asarray(p, dtype=float) for p in params]
        for l, (w_in, w_out) in enumerate(zip(widths[:-1], widths[1:])):
            if self.params[2 * l].shape != (w_in, w_out) or self.params[2 * l + 1].shape != (w_out,):
                raise DomainError(f"parameter shapes do not match layer {l}")

    @classmethod
    def initialize(cls, widths, activation="silu", seed=0):
        """Fan-in scaled normal weights, zero biases, zero final layer (initial drift is 0)."""
        model = cls(widths, activation)
        gen = rngmod.generator(seed, "init")
        n_layers = len(model.widths) - 1
        for l in range(n_layers - 1):
            w_in, w_out = model.widths[l], model.widths[l + 1]
            model.params[2 * l] = gen.standard_normal((w_in, w_out)) / math.sqrt(w_in)
        return model

    @property
    def dim(self) -> int:
        return self.widths[-1]

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def copy(self) -> "NeuralDrift":
        return NeuralDrift(self.widths, self.activation, [p.copy() for p in self.params])

    def features(self, x, x0, s):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        x0 = np.asarray(x0, dtype=float)
        x0 = np.broadcast_to(x0, x.shape) if x0.ndim == 1 else x0
        if x.shape[-1] != self.dim or x0.shape != x.shape:
            raise DomainError(f"expected inputs of dimension {self.dim}, got x {x.shape}, x0 {x0.shape}")
        s = np.broadcast_to(np.asarray(s, dtype=float), x.shape[:1])
        return np.concatenate([x, x0, s[:, None]], axis=1)

    def _forward(self, feats):
        _, act, _ = ACTIVATIONS[self.activation]
        pre, post = [], [feats]
        h = feats
        n_layers = len(self.widths) - 1
        for l in range(n_layers):
            a = h @ self.params[2 * l] + self.params[2 * l + 1]
            if l == n_layers - 1:
                return a, (pre, post)
            pre.append(a)
            h = act(a)
            post.append(h)

    def _backward(self, cache, grad_out):
        _, _, dact = ACTIVATIONS[self.activation]
        pre, post = cache
        grads = [None] * len(self.params)
        g = grad_out
        for l in reversed(range(len(self.widths) - 1)):
            grads[2 * l] = post[l].T @ g
            grads[2 * l + 1] = g.sum(axis=0)
            if l > 0:
                g = (g @ self.params[2 * l].T) * dact(pre[l - 1])
        return grads

    def forward(self, x, x0, s):
        out, _ = self._forward(self.features(x, x0, s))
        return out

    def __call__(self, x, x0, s):
        x = np.asarray(x)
        out = self.forward(x, x0, s)
        return out[0] if x.ndim == 1 else out


def forward(model: NeuralDrift, x, x0, s):
    return model(x, x0, s)


def loss_gradient(model: NeuralDrift, sched: Schedule, batch, s_draws, z_draws):
    """Empirical loss and its exact gradient with respect to every parameter.

    Returns ``(loss, grads)`` with ``grads`` aligned with ``model.params``.
    """
    x0, x1 = _stack_batch(batch)
    s = np.asarray(s_draws, dtype=float)
    z = np.asarray(z_draws, dtype=float)
    if s.shape != (x0.shape[0],) or z.shape != x0.shape:
        raise DomainError("s_draws and z_draws must match the batch")
    I, R = interpolate(sched, x0, x1, s, z)
    # overflow surfaces as a non-finite loss, which the training loop reports
    with np.errstate(over="ignore", invalid="ignore"):
        out, cache = model._forward(model.features(I, x0, s))
        resid = out - R
        n = resid.shape[0]
        loss = float(np.sum(resid * resid) / n)
        grads = model._backward(cache, (2.0 / n) * resid)
    return loss, grads


@dataclass
class TrainConfig:
    batch_size: int = 1000
    epochs: int = 100
    lr: float = 1e-3
    weight_decay: float = 1e-2
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    val_fraction: float = 0.1
    seed: int = 0
    log_every: int = 10

    def __post_init__(self):
        if self.batch_size < 1:
            raise DomainError("batch size must be >= 1")
        if not self.lr > 0:
            raise DomainError("learning rate must be positive")
        if self.epochs < 0:
            raise DomainError("epochs must be >= 0")
        self.betas = tuple(self.betas)


def cosine_lr(base_lr: float, epoch: int, epochs: int) -> float:
    """Learning rate for ``epoch`` (0-based); reaches zero after the last epoch."""
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * epoch / epochs))


@dataclass
class AdamW:
    """Adam with decoupled weight decay: ``p <- p (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps)``."""

    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-2
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def step(self, params, grads, lr):
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p *= 1.0 - lr * self.weight_decay
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainResult:
    model: NeuralDrift
    history: list
    optimizer: AdamW
    epoch: int
    val_history: list


def _val_draws(cfg: TrainConfig, n: int, d: int):
    gen = rngmod.generator(cfg.seed, "split", 1)
    return gen.uniform(0.0, 1.0, n), gen.standard_normal((n, d))


def train(
    model: NeuralDrift,
    dataset: TransitionDataset,
    cfg: TrainConfig,
    sched: Schedule,
    optimizer: AdamW | None = None,
    start_epoch: int = 0,
    val_dataset: TransitionDataset | None = None,
    stop_epoch: int | None = None,
) -> TrainResult:
    """Minibatch AdamW on the interpolant loss; one time and noise draw per sample per visit.

    Epoch ``e`` draws its permutation, times and noises from the stream
    ``(seed, "train", e)``, so resuming at an epoch boundary reproduces an
    uninterrupted run.  ``stop_epoch`` ends the run early without changing the
    learning-rate schedule.
    """
    if len(dataset) == 0:
        raise DomainError("empty dataset")
    if dataset.dim != model.dim:
        raise DomainError(f"dataset dimension {dataset.dim} != model dimension {model.dim}")
    if optimizer is None:
        optimizer = AdamW(cfg.betas, cfg.adam_eps, cfg.weight_decay)
    n, d = dataset.x0.shape
    bs = min(cfg.batch_size, n)
    history = []
    val_history = []
    if val_dataset is not None:
        vs, vz = _val_draws(cfg, len(val_dataset), d)
    stop = cfg.epochs if stop_epoch is None else min(stop_epoch, cfg.epochs)
    for epoch in range(start_epoch, stop):
        lr = cosine_lr(cfg.lr, epoch, cfg.epochs)
        gen = rngmod.generator(cfg.seed, "train", epoch)
        perm = gen.permutation(n)
        for start in range(0, n, bs):
            idx = perm[start : start + bs]
            s = gen.uniform(0.0, 1.0, idx.size)
            z = gen.standard_normal((idx.size, d))
            loss, grads = loss_gradient(model, sched, (dataset.x0[idx], dataset.x1[idx]), s, z)
            step = optimizer.t
            if not math.isfinite(loss):
                raise NumericalError("non-finite training loss", step=step, epoch=epoch, lr=lr)
            gnorm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
            optimizer.step(model.params, grads, lr)
            history.append({"step": step, "epoch": epoch, "loss": loss, "grad_norm": gnorm, "lr": lr})
        if val_dataset is not None:
            vl = empirical_loss(sched, model, (val_dataset.x0, val_dataset.x1), vs, vz)
            val_history.append({"epoch": epoch, "val_loss": vl})
        if cfg.log_every and (epoch + 1) % cfg.log_every == 0:
            recent = [h["loss"] for h in history[-max(1, n // bs) :]]
            log.info("epoch %d lr %.3g loss %.5f", epoch + 1, lr, float(np.mean(recent)))
    return TrainResult(model, history, optimizer, max(stop, start_epoch), val_history)


# -- checkpoints -------------------------------------------------------------

CKPT_MAGIC = b"SIFCKPT\x01"
CKPT_VERSION = 1
_SCHEDULE_IDS = {ScheduleKind.LINEAR_BETA: 1, ScheduleKind.QUADRATIC_BETA: 2, ScheduleKind.CUSTOM: 3}
_SCHEDULE_BY_ID = {v: k for k, v in _SCHEDULE_IDS.items()}


def save_checkpoint(path, model: NeuralDrift, sched: Schedule, optimizer: AdamW | None = None, epoch: int = 0):
    """Write the versioned binary checkpoint described in the README."""
    has_opt = optimizer is not None and bool(optimizer.m)
    head = CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(model.widths))
    head += struct.pack(f"<{len(model.widths)}I", *model.widths)
    head += struct.pack(
        "<IIdQQI",
        ACTIVATIONS[model.activation][0],
        _SCHEDULE_IDS[sched.kind],
        float(sched.epsilon),
        optimizer.t if optimizer is not None else 0,
        int(epoch),
        int(has_opt),
    )
    blocks = list(model.params)
    if has_opt:
        blocks += list(optimizer.m) + list(optimizer.v)
    with open(path, "wb") as fh:
        fh.write(head)
        for b in blocks:
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Return ``(model, schedule_kind, epsilon, optimizer_or_None, epoch)``."""
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise DomainError(f"{path}: not a checkpoint file")
    version, n_w = struct.unpack_from("<II", raw, 8)
    if version != CKPT_VERSION:
        raise DomainError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    widths = list(struct.unpack_from(f"<{n_w}I", raw, off))
    off += 4 * n_w
    act_id, sched_id, eps, step, epoch, has_opt = struct.unpack_from("<IIdQQI", raw, off)
    off += struct.calcsize("<IIdQQI")
    shapes = [s for w_in, w_out in zip(widths[:-1], widths[1:]) for s in ((w_in, w_out), (w_out,))]

    def take(n_sets):
        nonlocal off
        out = []
        for _ in range(n_sets):
            for shp in shapes:
                cnt = int(np.prod(shp))
                out.append(np.frombuffer(raw, "<f8", cnt, off).reshape(shp).astype(float))
                off += 8 * cnt
        return out

    params = take(1)
    model = NeuralDrift(widths, _ACTIVATION_BY_ID[act_id], params)
    opt = None
    if has_opt:
        mv = take(2)
        k = len(shapes)
        opt = AdamW(t=step, m=mv[:k], v=mv[k:])
    if off != len(raw):
        raise DomainError(f"{path}: trailing bytes in checkpoint")
    return model, _SCHEDULE_BY_ID[sched_id], eps, opt, epoch


def history_rows(history):
    return [[h["step"], h["epoch"], h["loss"], h["grad_norm"], h["lr"]] for h in history]


def config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["betas"] = list(cfg.betas)
    return d
