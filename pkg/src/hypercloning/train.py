"""Desk-scale causal LM training: schedule, AdamW, byte corpus, loop."""

import csv
import hashlib
import logging
import math
from dataclasses import asdict, dataclass, fields, replace
from importlib import resources

import numpy as np

from . import model as M
from .backprop import cross_entropy, loss_and_grads
from .errors import ContractError, DivergenceError
from .tensor import Rng

log = logging.getLogger(__name__)

BYTE_VOCAB = 256
PAD_ID = 256


@dataclass(frozen=True)
class TrainConfig:
    max_lr: float = 1.5e-4
    warmup_steps: int = 100
    decay_end_step: int = 1000
    min_lr_fraction: float = 0.1
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 8
    context_len: int = 64
    total_steps: int = 1000
    dropout_p: float = 0.0
    seed: int = 0
    data_seed: int = 0
    eval_interval: int = 100
    eval_batches: int = 4
    track_interval: int = 0
    checkpoint_interval: int = 0

    def __post_init__(self):
        if self.warmup_steps >= self.decay_end_step:
            raise ContractError("warmup_steps must be < decay_end_step")
        if self.max_lr <= 0 or self.batch_size < 1 or self.context_len < 1 or self.total_steps < 0:
            raise ContractError("max_lr, batch_size, context_len must be positive; total_steps >= 0")
        if not 0.0 < self.min_lr_fraction <= 1.0:
            raise ContractError("min_lr_fraction must be in (0, 1]")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ContractError("dropout_p must be in [0, 1)")
        if self.weight_decay < 0 or self.adam_eps <= 0:
            raise ContractError("weight_decay must be >= 0 and adam_eps > 0")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# Table-2 peak learning rates, otherwise desk-sized.
TRAIN_PRESETS = {
    "opt": TrainConfig(max_lr=1.5e-4),
    "pythia": TrainConfig(max_lr=1.5e-4),
    "olmo": TrainConfig(max_lr=3e-4),
}


def lr_at(step, cfg):
    """Linear warmup to max_lr, linear decay to max_lr * min_lr_fraction, then flat."""
    if step < 0:
        raise ContractError("step must be >= 0")
    if step < cfg.warmup_steps:
        return cfg.max_lr * step / cfg.warmup_steps
    if step >= cfg.decay_end_step:
        return cfg.max_lr * cfg.min_lr_fraction
    frac = (step - cfg.warmup_steps) / (cfg.decay_end_step - cfg.warmup_steps)
    return cfg.max_lr * (1.0 - frac * (1.0 - cfg.min_lr_fraction))


# -- data -------------------------------------------------------------------


def bundled_corpus_path():
    return str(resources.files("hypercloning").joinpath("data/kjv.txt"))


class Corpus:
    """Byte-level token stream with a seeded window sampler.

    Token ids are raw bytes (0..255); id 256 is reserved for padding and
    never emitted because every window is cut from inside the text. The
    last ``eval_fraction`` of the bytes is held out.
    """

    vocab_size = BYTE_VOCAB + 1

    def __init__(self, data, eval_fraction=0.05):
        if isinstance(data, (bytes, bytearray)):
            tokens = np.frombuffer(bytes(data), dtype=np.uint8)
        else:
            tokens = np.asarray(data, dtype=np.uint8)
        if tokens.size < 1024:
            raise ContractError("corpus too small (need at least 1024 bytes)")
        split = int(tokens.size * (1.0 - eval_fraction))
        self.train_tokens = tokens[:split].astype(np.int64)
        self.eval_tokens = tokens[split:].astype(np.int64)

    @classmethod
    def from_file(cls, path=None, eval_fraction=0.05):
        path = path or bundled_corpus_path()
        with open(path, "rb") as fh:
            return cls(fh.read(), eval_fraction)

    def batch(self, step, batch_size, context_len, seed):
        """Training batch for ``step``: (batch_size, context_len + 1) windows.

        Depends only on (seed, step, sizes), never on the model.
        """
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(step)])))
        hi = self.train_tokens.size - context_len - 1
        starts = rng.integers(0, hi, size=batch_size)
        return self.train_tokens[starts[:, None] + np.arange(context_len + 1)[None, :]]

    def eval_slice(self, n_batches, batch_size, context_len):
        """Fixed held-out windows, evenly spaced; list of batches."""
        n = n_batches * batch_size
        hi = self.eval_tokens.size - context_len - 1
        if hi < 1:
            raise ContractError("held-out split shorter than one window")
        starts = np.linspace(0, hi, n).astype(np.int64)
        w = self.eval_tokens[starts[:, None] + np.arange(context_len + 1)[None, :]]
        return [w[i * batch_size : (i + 1) * batch_size] for i in range(n_batches)]


def batch_hash(batch):
    return hashlib.sha1(np.ascontiguousarray(batch, dtype=np.int64).tobytes()).hexdigest()[:16]


# -- optimizer --------------------------------------------------------------


def init_adam_state(params):
    return {
        "step": 0,
        "m": {k: np.zeros_like(v) for k, v in params.items()},
        "v": {k: np.zeros_like(v) for k, v in params.items()},
    }


def adamw_step(params, grads, state, step, cfg, lr=None):
    """One decoupled-weight-decay Adam update; returns (params, state).

    ``step`` is 1-based and drives both the bias correction and, unless
    ``lr`` is passed, the learning rate. Norm parameters and biases are
    not decayed. Inputs are not modified.
    """
    if set(grads) != set(params) or set(state["m"]) != set(params):
        raise ContractError("params, grads and optimizer state must share names")
    lr = lr_at(step, cfg) if lr is None else lr
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1.0 - b1**step
    bc2 = 1.0 - b2**step
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        dt = p.dtype.type
        g = grads[name].astype(p.dtype, copy=False)
        m = dt(b1) * state["m"][name] + dt(1.0 - b1) * g
        v = dt(b2) * state["v"][name] + dt(1.0 - b2) * g * g
        update = (m / dt(bc1)) / (np.sqrt(v / dt(bc2)) + dt(cfg.adam_eps))
        q = p
        if cfg.weight_decay and not M.is_decay_exempt(name):
            q = q * dt(1.0 - lr * cfg.weight_decay)
        new_p[name] = q - dt(lr) * update
        new_m[name] = m
        new_v[name] = v
    return new_p, {"step": step, "m": new_m, "v": new_v}


# -- loop -------------------------------------------------------------------


LOG_FIELDS = ("step", "lr", "train_loss", "eval_loss", "tokens", "batch_hash")


class TrainLog:
    """Per-step metrics; ``params`` and ``opt_state`` hold the final state."""

    def __init__(self):
        self.rows = []
        self.params = None
        self.opt_state = None

    def append(self, **row):
        if self.rows and row["step"] <= self.rows[-1]["step"]:
            raise ContractError("log steps must be strictly increasing")
        self.rows.append({k: row.get(k) for k in LOG_FIELDS})

    def __len__(self):
        return len(self.rows)

    def column(self, name):
        return [r[name] for r in self.rows]

    def eval_points(self):
        """[(step, eval_loss)] for rows that carry an eval loss."""
        return [(r["step"], r["eval_loss"]) for r in self.rows if r["eval_loss"] is not None]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_FIELDS)
            for r in self.rows:
                w.writerow(["" if r[k] is None else (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in LOG_FIELDS])


def eval_loss(params, config, batches):
    """Mean cross-entropy over fixed batches, dropout off."""
    if isinstance(batches, np.ndarray) and batches.ndim == 2:
        batches = [batches]
    total = 0.0
    for b in batches:
        b = np.asarray(b)
        logits, _, _ = M.run(params, config, b[:, :-1])
        total += cross_entropy(logits, b[:, 1:])[0]
    return total / len(batches)


def train(params, config, corpus, cfg, hooks=(), checkpoint_fn=None, opt_state=None):
    """Run ``cfg.total_steps`` AdamW steps; returns a TrainLog.

    Batches come from ``corpus.batch(step, ..., cfg.data_seed)`` so two runs
    with the same data seed see the same data in the same order whatever
    their initialization. Dropout draws from a stream seeded by ``cfg.seed``.

    ``hooks`` are called as ``hook(step, params)`` at step 0 and every
    ``cfg.track_interval`` steps. ``checkpoint_fn(step, params, opt_state)``
    is called every ``cfg.checkpoint_interval`` steps and should return a
    reference (e.g. a path) reported if training later diverges.
    """
    M.check_params(params, config)
    if cfg.context_len > config.max_seq:
        raise ContractError(f"context_len {cfg.context_len} exceeds max_seq {config.max_seq}")
    if config.vocab_size < BYTE_VOCAB:
        raise ContractError(f"byte corpus needs vocab_size >= {BYTE_VOCAB}")
    run_config = replace(config, dropout_p=cfg.dropout_p)
    params = {k: v.copy() for k, v in params.items()}
    state = opt_state if opt_state is not None else init_adam_state(params)
    start = state["step"]
    dropout_rng = Rng(cfg.seed).spawn("dropout") if cfg.dropout_p > 0 else None
    eval_batches = corpus.eval_slice(cfg.eval_batches, cfg.batch_size, cfg.context_len)
    tokens_per_step = cfg.batch_size * cfg.context_len
    out = TrainLog()
    last_ckpt = None

    def run_hooks(step):
        for hook in hooks:
            hook(step, params)

    if cfg.total_steps > 0:
        if start == 0:
            out.append(step=0, lr=0.0, eval_loss=eval_loss(params, config, eval_batches), tokens=0)
        run_hooks(start)

    for step in range(start + 1, start + cfg.total_steps + 1):
        batch = corpus.batch(step - 1, cfg.batch_size, cfg.context_len, cfg.data_seed)
        loss, grads = loss_and_grads(params, run_config, batch, dropout_rng)
        if not math.isfinite(loss):
            raise DivergenceError(f"non-finite loss at step {step}", step=step, checkpoint=last_ckpt)
        lr = lr_at(step, cfg)
        params, state = adamw_step(params, grads, state, step, cfg, lr)
        ev = None
        if (cfg.eval_interval and step % cfg.eval_interval == 0) or step == start + cfg.total_steps:
            ev = eval_loss(params, config, eval_batches)
            log.info("step %d lr %.3g train %.4f eval %.4f", step, lr, loss, ev)
        out.append(step=step, lr=lr, train_loss=loss, eval_loss=ev, tokens=step * tokens_per_step,
                   batch_hash=batch_hash(batch))
        last = step == start + cfg.total_steps
        if (cfg.track_interval and step % cfg.track_interval == 0) or (last and step != start):
            run_hooks(step)
        if checkpoint_fn is not None and cfg.checkpoint_interval and step % cfg.checkpoint_interval == 0:
            last_ckpt = checkpoint_fn(step, params, state)

    out.params = params
    out.opt_state = state
    return out


def read_log_csv(path):
    rows = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            rows.append(r)
    return rows

