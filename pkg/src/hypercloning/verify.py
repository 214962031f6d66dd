"""Checks that an expanded model computes what its source computes."""

import json
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from .cloning import master_residual
from .errors import ContractError


@dataclass
class VerifyReport:
    tolerance: float
    precision: str
    logit_max_abs_diff: float = 0.0
    logit_max_rel_diff: float = 0.0
    argmax_agreement: float = 1.0
    snapshot_max_abs_diff: dict = field(default_factory=dict)
    snapshot_max_rel_diff: dict = field(default_factory=dict)
    first_failure: str = None
    worst_tensor: str = None
    worst_tensor_residual: float = 0.0
    metadata: dict = field(default_factory=dict)

    @property
    def passed(self):
        return self.logit_max_abs_diff <= self.tolerance and all(
            v <= self.tolerance for v in self.snapshot_max_abs_diff.values()
        )

    def to_dict(self):
        """Flat key/value view (JSON-ready)."""
        out = {
            "pass": self.passed,
            "tolerance": self.tolerance,
            "precision": self.precision,
            "logit_max_abs_diff": self.logit_max_abs_diff,
            "logit_max_rel_diff": self.logit_max_rel_diff,
            "argmax_agreement": self.argmax_agreement,
            "first_failure": self.first_failure,
            "worst_tensor": self.worst_tensor,
            "worst_tensor_residual": self.worst_tensor_residual,
        }
        for k, v in self.snapshot_max_abs_diff.items():
            out[f"snapshot.{k}.max_abs_diff"] = v
        for k, v in self.snapshot_max_rel_diff.items():
            out[f"snapshot.{k}.max_rel_diff"] = v
        for k, v in self.metadata.items():
            out[f"meta.{k}"] = v
        return out

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)


def _diffs(ref, got):
    d = np.abs(np.asarray(got, dtype=np.float64) - np.asarray(ref, dtype=np.float64))
    abs_d = float(d.max(initial=0.0))
    scale = float(np.abs(ref).max(initial=0.0))
    return abs_d, (abs_d / scale if scale > 0 else abs_d)


def argmax_lowest(logits):
    """Argmax along the last axis; ties go to the lowest index."""
    return np.argmax(logits, axis=-1)


def _check_receipt(receipt, params_s, config_s, params_d, config_d):
    if receipt.source_config != config_s or receipt.dest_config != config_d:
        raise ContractError("receipt configs do not match the models being compared")
    for name, e in receipt.entries.items():
        if name not in params_s and not (name == "unembedding" and config_s.tied_unembedding):
            raise ContractError(f"receipt tensor {name} missing from source params")
        if name not in params_d or tuple(params_d[name].shape) != tuple(e.dst_shape):
            raise ContractError(f"receipt tensor {name} disagrees with destination params")


def _source_tensor(params_s, config_s, name):
    if name == "unembedding" and config_s.tied_unembedding:
        return params_s["embedding"]
    return params_s[name]


def verify_preservation(params_s, config_s, params_d, config_d, receipt, batches, tolerance=1e-10,
                        precision="float64"):
    """Run both models in eval mode on every batch and compare.

    Logits are compared directly; each destination snapshot against the
    source snapshot cloned through the residual-stream map. Also reports
    the tensor whose cloning constraint is furthest off.
    """
    M.check_params(params_s, config_s)
    M.check_params(params_d, config_d)
    _check_receipt(receipt, params_s, config_s, params_d, config_d)
    dtype = np.dtype(precision)
    ps = M.cast_params(params_s, dtype)
    pd = M.cast_params(params_d, dtype)
    rmap = receipt.residual_map
    rep = VerifyReport(tolerance=float(tolerance), precision=dtype.name)
    rep.metadata = {
        "strategy": receipt.expansion.strategy,
        "embed_fold": receipt.expansion.embed_fold,
        "ffn_fold": receipt.expansion.ffn_fold,
        "head_count_fold": receipt.expansion.head_count_fold,
        "head_dim_fold": receipt.expansion.head_dim_fold,
        "seed": receipt.expansion.seed,
        "batches": len(batches),
    }
    names = M.snapshot_names(config_s)
    abs_d = dict.fromkeys(names, 0.0)
    rel_d = dict.fromkeys(names, 0.0)
    agree = 0
    total = 0
    for toks in batches:
        ts = M.forward(ps, config_s, toks)
        td = M.forward(pd, config_d, toks)
        a, r = _diffs(ts.logits, td.logits)
        rep.logit_max_abs_diff = max(rep.logit_max_abs_diff, a)
        rep.logit_max_rel_diff = max(rep.logit_max_rel_diff, r)
        am_s = argmax_lowest(ts.logits)
        am_d = argmax_lowest(td.logits)
        agree += int((am_s == am_d).sum())
        total += am_s.size
        for n in names:
            a, r = _diffs(rmap.apply(ts.hidden[n]), td.hidden[n])
            abs_d[n] = max(abs_d[n], a)
            rel_d[n] = max(rel_d[n], r)
    rep.snapshot_max_abs_diff = abs_d
    rep.snapshot_max_rel_diff = rel_d
    rep.argmax_agreement = agree / total if total else 1.0
    rep.first_failure = next((n for n in names if abs_d[n] > tolerance), None)
    if rep.first_failure is None and rep.logit_max_abs_diff > tolerance:
        rep.first_failure = "logits"

    for name, e in receipt.entries.items():
        res = master_residual(e, _source_tensor(params_s, config_s, name), params_d[name])
        if res > rep.worst_tensor_residual:
            rep.worst_tensor, rep.worst_tensor_residual = name, res
    return rep


def verify_argmax_stability(params_s, config_s, params_d, config_d, batches, precision=None):
    """Fraction of positions whose greedy next token agrees (ties to lowest id)."""
    if precision is not None:
        params_s = M.cast_params(params_s, precision)
        params_d = M.cast_params(params_d, precision)
    agree = 0
    total = 0
    for toks in batches:
        a = argmax_lowest(M.forward(params_s, config_s, toks).logits)
        b = argmax_lowest(M.forward(params_d, config_d, toks).logits)
        agree += int((a == b).sum())
        total += a.size
    return agree / total if total else 1.0


def random_batches(vocab_size, n_batches, seq_len, batch_size=1, seed=0):
    rng = np.random.Generator(np.random.PCG64(seed))
    return [rng.integers(0, vocab_size, size=(batch_size, seq_len)) for _ in range(n_batches)]
