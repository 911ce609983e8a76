"""Minibatch training with Adam, checkpointing and loss-trace logging."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import store
from .model import elbo_loss, init_params
from .mpnn import GraphBatch, MPNNConfig, as_tensors

log = logging.getLogger(__name__)

CHECKPOINT_KIND = "cvgae-checkpoint"
CHECKPOINT_VERSION = 1
TRACE_FIELDS = ("step", "recon", "kl_post_prior", "kl_prior_uncond", "total")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-4
    batch_size: int = 20
    alpha: float = 1e-5
    dropout: float = 0.2
    max_steps: int = 1000
    seed: int = 0
    checkpoint_interval: int = 0
    grad_clip: float | None = None
    early_stopping_patience: int | None = None
    validation_interval: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        if self.max_steps < 0:
            raise ValueError("max_steps must be nonnegative")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ValueError("grad_clip must be positive")


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> tuple[dict, AdamState]:
    """Bias-corrected Adam. Returns new parameter and state objects."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {k!r}")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_p, new_m, new_v = {}, {}, {}
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for k, p in params.items():
        g = grads[k]
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {k!r} {p.shape}")
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * g * g
        new_m[k], new_v[k] = m, v
        new_p[k] = p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return new_p, AdamState(new_m, new_v, t, b1, b2, state.eps)


def loss_and_grads(params, graphs, refs, mconfig: MPNNConfig, tconfig: TrainConfig, rng, training=True):
    """Negative mean ELBO over the batch and its gradient for every parameter."""
    tape = ad.Tape()
    leaves = as_tensors(params, tape)
    names = list(params)
    out = elbo_loss(GraphBatch.from_graphs(graphs), refs, leaves, mconfig, tconfig.alpha, rng,
                    training=training, dropout=tconfig.dropout)
    n = len(graphs)
    loss = ad.scale(out.objective, -1.0 / n)
    grads = dict(zip(names, tape.backward(loss, [leaves[k] for k in names])))
    return loss.item(), out, grads


def _clip(grads, max_norm):
    norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        return {k: g * (max_norm / norm) for k, g in grads.items()}
    return grads


@dataclass
class Trainer:
    """Owns the full training state; every field is serialised in checkpoints."""

    params: dict[str, np.ndarray]
    mconfig: MPNNConfig
    tconfig: TrainConfig
    adam: AdamState
    rng: np.random.Generator
    step: int = 0
    epoch: int = 0
    epoch_order: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    epoch_pos: int = 0
    trace: list[tuple] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @classmethod
    def create(cls, mconfig: MPNNConfig, tconfig: TrainConfig, d_v: int, d_e: int, meta=None) -> "Trainer":
        params = init_params(mconfig, d_v, d_e, seed=tconfig.seed)
        rng = np.random.default_rng(tconfig.seed + 1)
        return cls(params, mconfig, tconfig, AdamState.zeros_like(params), rng, meta=dict(meta or {}))

    def train_step(self, graphs, refs) -> float:
        loss, out, grads = loss_and_grads(self.params, graphs, refs, self.mconfig, self.tconfig, self.rng)
        if self.tconfig.grad_clip is not None:
            grads = _clip(grads, self.tconfig.grad_clip)
        self.params, self.adam = adam_step(self.params, grads, self.adam, self.tconfig.learning_rate)
        self.step += 1
        n = len(graphs)
        self.trace.append((self.step, out.recon_loglik / n, out.kl_post_prior / n, out.kl_prior_uncond / n, -loss))
        return loss

    def train_epoch(self, dataset, indices, max_steps: int | None = None) -> list[float]:
        """Run the remainder of the current epoch (shuffling first if a new one starts).

        Returns the per-batch losses; stops early once ``max_steps`` is reached.
        """
        indices = np.asarray(indices, dtype=np.int64)
        if len(indices) == 0:
            raise ValueError("empty training split")
        if self.epoch_pos >= len(self.epoch_order):
            self.epoch_order = self.rng.permutation(indices)
            self.epoch_pos = 0
            self.epoch += 1
        losses = []
        bs = self.tconfig.batch_size
        while self.epoch_pos < len(self.epoch_order):
            if max_steps is not None and self.step >= max_steps:
                break
            idx = self.epoch_order[self.epoch_pos : self.epoch_pos + bs]
            self.epoch_pos += len(idx)
            graphs = [dataset.entries[i][0] for i in idx]
            refs = [dataset.entries[i][1].coords for i in idx]
            losses.append(self.train_step(graphs, refs))
        return losses

    def validation_loss(self, dataset, indices) -> float:
        """Mean negative ELBO with dropout off and a fixed noise stream."""
        rng = np.random.default_rng(self.tconfig.seed + 2)
        total, n = 0.0, 0
        bs = self.tconfig.batch_size
        for start in range(0, len(indices), bs):
            idx = indices[start : start + bs]
            graphs = [dataset.entries[i][0] for i in idx]
            refs = [dataset.entries[i][1].coords for i in idx]
            out = elbo_loss(graphs, refs, self.params, self.mconfig, self.tconfig.alpha, rng, training=False)
            total -= out.total
            n += len(idx)
        return total / max(n, 1)

    def fit(self, dataset, train_indices, valid_indices=None, out_dir=None) -> list[tuple]:
        """Train until ``max_steps``, with optional periodic checkpoints and
        validation-based early stopping."""
        cfg = self.tconfig
        marks = [k for k in (cfg.checkpoint_interval, cfg.validation_interval) if k]
        best, bad = np.inf, 0
        while self.step < cfg.max_steps:
            target = cfg.max_steps
            for k in marks:
                target = min(target, (self.step // k + 1) * k)
            while self.step < target:
                self.train_epoch(dataset, train_indices, target)
            if out_dir is not None and cfg.checkpoint_interval and self.step % cfg.checkpoint_interval == 0:
                self.save(Path(out_dir) / f"checkpoint_{self.step:07d}.ckpt")
            if (valid_indices is not None and len(valid_indices) and cfg.validation_interval
                    and self.step % cfg.validation_interval == 0):
                val = self.validation_loss(dataset, valid_indices)
                log.info("step %d validation loss %.6f", self.step, val)
                if val < best:
                    best, bad = val, 0
                else:
                    bad += 1
                    if cfg.early_stopping_patience and bad >= cfg.early_stopping_patience:
                        log.info("early stopping at step %d", self.step)
                        break
        return self.trace

    # -- persistence ---------------------------------------------------------------

    def save(self, path) -> None:
        arrays = {f"param/{k}": v for k, v in self.params.items()}
        arrays.update({f"adam_m/{k}": v for k, v in self.adam.m.items()})
        arrays.update({f"adam_v/{k}": v for k, v in self.adam.v.items()})
        arrays["epoch_order"] = np.asarray(self.epoch_order, dtype=np.int64)
        arrays["trace"] = np.asarray(self.trace, dtype=np.float64).reshape(-1, len(TRACE_FIELDS))
        meta = {
            "mpnn": asdict(self.mconfig),
            "train": asdict(self.tconfig),
            "step": self.step,
            "epoch": self.epoch,
            "epoch_pos": self.epoch_pos,
            "adam": {"step": self.adam.step, "beta1": self.adam.beta1, "beta2": self.adam.beta2, "eps": self.adam.eps},
            "rng": _rng_state(self.rng),
            "extra": self.meta,
        }
        store.save(path, CHECKPOINT_KIND, CHECKPOINT_VERSION, meta, arrays)

    @classmethod
    def load(cls, path) -> "Trainer":
        meta, arrays = store.load(path, CHECKPOINT_KIND, CHECKPOINT_VERSION)
        try:
            params = {k[6:]: v for k, v in arrays.items() if k.startswith("param/")}
            m = {k[7:]: v for k, v in arrays.items() if k.startswith("adam_m/")}
            v = {k[7:]: v for k, v in arrays.items() if k.startswith("adam_v/")}
            a = meta["adam"]
            rng = np.random.default_rng()
            rng.bit_generator.state = meta["rng"]
            trace = [(int(r[0]), *map(float, r[1:])) for r in arrays["trace"]]
            return cls(
                params,
                MPNNConfig(**meta["mpnn"]),
                TrainConfig(**meta["train"]),
                AdamState(m, v, a["step"], a["beta1"], a["beta2"], a["eps"]),
                rng,
                meta["step"],
                meta["epoch"],
                arrays["epoch_order"],
                meta["epoch_pos"],
                trace,
                meta.get("extra", {}),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise store.StoreError(f"corrupt checkpoint: {exc}") from exc


def _rng_state(rng: np.random.Generator) -> dict:
    # JSON keeps Python's arbitrary-precision integers exact
    return rng.bit_generator.state


def write_trace(trace, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_FIELDS)
        for row in trace:
            w.writerow([int(row[0])] + [repr(float(x)) for x in row[1:]])


def train_config_fields() -> set[str]:
    return {f.name for f in fields(TrainConfig)}
