"""Weight-symmetry and singular-spectrum diagnostics for cloned models."""

import csv
import fnmatch
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError


def symmetry_cosine(w, in_map):
    """Mean cosine between the column copies of each row.

    Columns are grouped by copy ordinal (copy t of every source column);
    for each row and each unordered pair of copies the cosine of the two
    sub-vectors is taken, and the mean over rows and pairs returned. A
    pair where either sub-vector is all zeros counts as 0.
    """
    w = np.asarray(w, dtype=np.float64)
    n = in_map.fold
    if n < 2:
        raise ContractError("symmetry cosine needs a map with fold >= 2")
    if w.ndim != 2 or w.shape[1] != in_map.dest_size:
        raise ContractError(f"weight shape {w.shape} does not match map dest size {in_map.dest_size}")
    sub = w[:, in_map.groups()]  # (rows, n, src)
    norms = np.sqrt(np.einsum("rns,rns->rn", sub, sub))
    vals = []
    for a in range(n):
        for b in range(a + 1, n):
            dot = np.einsum("rs,rs->r", sub[:, a], sub[:, b])
            den = norms[:, a] * norms[:, b]
            vals.append(np.where(den > 0, dot / np.where(den > 0, den, 1.0), 0.0))
    return float(np.mean(vals))


def zero_count(sv, zero_threshold_rel):
    sv = np.asarray(sv)
    if sv.size == 0:
        return 0
    return int(np.sum(sv <= zero_threshold_rel * sv[0]))


def spectrum(w, zero_threshold_rel=1e-6):
    """(descending singular values, number at or below threshold * sigma_max)."""
    if not 0.0 < zero_threshold_rel < 1.0:
        raise ContractError("zero_threshold_rel must be in (0, 1)")
    sv = T.singular_values(w)
    return sv, zero_count(sv, zero_threshold_rel)


DEFAULT_SELECTION = ("blocks.*.ffn.w_up", "unembedding")


@dataclass
class SymmetryReport:
    rows: list = field(default_factory=list)  # dicts: step, tensor, fold, cosine

    def value(self, tensor, step):
        for r in self.rows:
            if r["tensor"] == tensor and r["step"] == step:
                return r["cosine"]
        raise KeyError((tensor, step))


@dataclass
class SpectrumReport:
    rows: list = field(default_factory=list)  # dicts: step, tensor, zero_count, threshold, singular_values

    def value(self, tensor, step):
        for r in self.rows:
            if r["tensor"] == tensor and r["step"] == step:
                return r
        raise KeyError((tensor, step))


def select_tensors(receipt, selection=None, require_fold=False, params=None):
    """Names of 2-D weights matching any glob in ``selection``.

    Candidates come from the receipt, or from ``params`` when there is no
    receipt (an uncloned model: spectra only).
    """
    patterns = DEFAULT_SELECTION if selection is None else tuple(selection)
    if receipt is not None:
        names = [n for n, e in receipt.entries.items() if e.kind in ("linear", "lookup")]
    elif params is not None:
        names = [n for n, v in params.items() if np.ndim(v) == 2]
    else:
        raise ContractError("need a receipt or params to select tensors")
    picked = [n for n in names if any(fnmatch.fnmatchcase(n, p) for p in patterns)]
    for p in patterns:
        if not any(fnmatch.fnmatchcase(n, p) for n in names):
            raise ContractError(f"no tensor matches {p!r}; known: {', '.join(names)}")
    if require_fold:
        if receipt is None:
            raise ContractError("symmetry needs clone maps; this model has no expansion receipt")
        bad = [n for n in picked if receipt[n].col_map.fold < 2]
        if bad:
            raise ContractError(f"symmetry undefined for unexpanded inputs: {', '.join(bad)}")
    return picked


def track(params, receipt, step, selection=None, zero_threshold_rel=1e-6, symmetry=True, spectra=True,
          reports=None):
    """Append one row per selected tensor to (SymmetryReport, SpectrumReport)."""
    sym, spec = reports if reports is not None else (SymmetryReport(), SpectrumReport())
    for name in select_tensors(receipt, selection, params=params):
        w = params[name]
        if symmetry and receipt is not None and receipt[name].col_map.fold >= 2:
            e = receipt[name]
            sym.rows.append({"step": step, "tensor": name, "fold": e.col_map.fold,
                             "cosine": symmetry_cosine(w, e.col_map)})
        if spectra:
            sv, zc = spectrum(w, zero_threshold_rel)
            spec.rows.append({"step": step, "tensor": name, "zero_count": zc, "threshold": zero_threshold_rel,
                              "sigma_max": float(sv[0]), "singular_values": sv.tolist()})
    return sym, spec


def _append_csv(path, header, rows):
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(header)
        for r in rows:
            w.writerow([repr(r[k]) if isinstance(r[k], float) else r[k] for k in header])


def append_symmetry_csv(path, rows):
    _append_csv(path, ("step", "tensor", "fold", "cosine"), rows)


def append_spectrum_csv(path, rows):
    _append_csv(path, ("step", "tensor", "zero_count", "threshold", "sigma_max"), rows)


def write_spectra_json(path, rows):
    """Full singular-value arrays, keyed by tensor then step."""
    out = {}
    for r in rows:
        out.setdefault(r["tensor"], {})[str(r["step"])] = r["singular_values"]
    with open(path, "w") as fh:
        json.dump(out, fh, sort_keys=True)


def make_track_hook(receipt, out_dir, selection=None, symmetry=True, spectra=True, zero_threshold_rel=1e-6):
    """Training hook that appends analysis rows to CSV/JSON files in ``out_dir``.

    Also keeps the reports in memory on the returned callable (``.reports``).
    """
    reports = (SymmetryReport(), SpectrumReport())
    if symmetry:
        select_tensors(receipt, selection, require_fold=True)

    def hook(step, params):
        n_sym = len(reports[0].rows)
        n_spec = len(reports[1].rows)
        track(params, receipt, step, selection, zero_threshold_rel, symmetry, spectra, reports)
        if out_dir is None:
            return
        if symmetry:
            append_symmetry_csv(os.path.join(out_dir, "symmetry.csv"), reports[0].rows[n_sym:])
        if spectra:
            append_spectrum_csv(os.path.join(out_dir, "spectrum.csv"), reports[1].rows[n_spec:])
            write_spectra_json(os.path.join(out_dir, "spectra.json"), reports[1].rows)

    hook.reports = reports
    return hook
