"""Width expansion that keeps a transformer's function intact.

A :class:`CloneMap` says which source coordinate each destination
coordinate copies. A linear layer fed a cloned input produces a cloned
output iff, for every destination row r and source column j, the
destination weights in row r over the columns that copy j add up to the
source weight at (out_map[r], j). Every strategy below is a different way
of splitting that mass:

* ``symmetric``: every copy gets W / n
* ``diagonal``: copy t of the row takes everything from copy t of the
  column, the other copies get zero (needs equal in and out folds)
* ``noisy-symmetric`` / ``noisy-diagonal``: as above, plus noise whose
  copies sum to zero along each row
"""

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import model as M
from .errors import ContractError, StrategyInapplicableError
from .tensor import Rng

STRATEGIES = ("symmetric", "diagonal", "noisy-symmetric", "noisy-diagonal")


def normalize_strategy(name):
    s = str(name).strip().lower().replace("_", "-")
    if s not in STRATEGIES:
        raise ContractError(f"unknown strategy {name!r}; choose from {STRATEGIES}")
    return s


@dataclass(frozen=True, eq=False)
class CloneMap:
    dest_size: int
    src_size: int
    map: np.ndarray
    # compact description used for serialization; ("explicit",) stores the array
    spec: tuple = ("explicit",)

    def __post_init__(self):
        m = np.asarray(self.map, dtype=np.int64)
        object.__setattr__(self, "map", m)
        if m.shape != (self.dest_size,):
            raise ContractError(f"map length {m.shape} != dest_size {self.dest_size}")
        if m.size and (m.min() < 0 or m.max() >= self.src_size):
            raise ContractError("map entries must lie in [0, src_size)")
        if np.unique(m).size != self.src_size:
            raise ContractError("every source index needs at least one preimage")

    def __eq__(self, other):
        return (
            isinstance(other, CloneMap)
            and self.dest_size == other.dest_size
            and self.src_size == other.src_size
            and np.array_equal(self.map, other.map)
        )

    @property
    def fold(self):
        """Copies per source index; raises if the map is not uniform."""
        counts = np.bincount(self.map, minlength=self.src_size)
        if not np.all(counts == counts[0]):
            raise ContractError("clone map is not uniform")
        return int(counts[0])

    @property
    def is_identity(self):
        return self.dest_size == self.src_size and np.array_equal(self.map, np.arange(self.src_size))

    def ordinals(self):
        """ordinals()[i] is how many earlier destination indices copy map[i]."""
        seen = np.zeros(self.src_size, dtype=np.int64)
        out = np.empty(self.dest_size, dtype=np.int64)
        for i, s in enumerate(self.map):
            out[i] = seen[s]
            seen[s] += 1
        return out

    def groups(self):
        """(fold, src_size) array: groups()[t, j] is the destination index of copy t of j."""
        n = self.fold
        g = np.empty((n, self.src_size), dtype=np.int64)
        g[self.ordinals(), self.map] = np.arange(self.dest_size)
        return g

    def apply(self, x, axis=-1):
        """Clone ``x`` along ``axis``."""
        return np.take(x, self.map, axis=axis)

    def to_dict(self):
        if self.spec[0] == "explicit":
            return {"kind": "explicit", "src_size": self.src_size, "map": self.map.tolist()}
        kind, *args = self.spec
        if kind == "stacked":
            return {"kind": kind, "src_size": args[0], "fold": args[1]}
        return {"kind": kind, "n_heads": args[0], "d_head": args[1], "h": args[2], "k": args[3]}

    @classmethod
    def from_dict(cls, d):
        if d["kind"] == "stacked":
            return make_clone_map(d["src_size"], d["fold"])
        if d["kind"] == "heads":
            return make_head_clone_map(d["n_heads"], d["d_head"], d["h"], d["k"])
        m = np.asarray(d["map"], dtype=np.int64)
        return cls(m.size, int(d["src_size"]), m)


def make_clone_map(src_size, fold):
    """n stacked copies: destination index i copies i mod src_size."""
    if fold < 1 or src_size < 1:
        raise ContractError("src_size and fold must be >= 1")
    return CloneMap(src_size * fold, src_size, np.arange(src_size * fold) % src_size, ("stacked", src_size, fold))


def make_head_clone_map(n_heads, d_head, h, k):
    """Map for a head-major (heads, lanes) axis after head and lane cloning.

    Destination head j copies source head j // h; inside a head, the
    d_head * k lanes are k stacked copies of the source lanes.
    """
    if min(n_heads, d_head, h, k) < 1:
        raise ContractError("head clone map counts must be >= 1")
    src_head = np.arange(n_heads * h) // h
    src_lane = np.arange(d_head * k) % d_head
    m = (src_head[:, None] * d_head + src_lane[None, :]).reshape(-1)
    return CloneMap(m.size, n_heads * d_head, m, ("heads", n_heads, d_head, h, k))


def identity_map(size):
    return make_clone_map(size, 1)


def noise_std_for(w, strategy, in_fold, snr_db):
    """Noise level at ``snr_db`` below the signal carried by one block.

    Symmetric blocks carry W / n, diagonal blocks carry W.
    """
    if not strategy.startswith("noisy") or in_fold < 2:
        return 0.0
    signal = float(np.std(w))
    if strategy == "noisy-symmetric":
        signal /= in_fold
    return signal * 10.0 ** (-snr_db / 20.0)


def expand_linear(w, b, in_map, out_map, strategy="symmetric", snr_db=10.0, rng=None, return_info=False):
    """Expand an (out, in) weight and its optional bias.

    Returns ``(w_dest, b_dest)``, or ``(w_dest, b_dest, info)`` with
    ``return_info``; info holds the strategy used and the noise std.
    """
    strategy = normalize_strategy(strategy)
    w = np.asarray(w)
    if w.shape != (out_map.src_size, in_map.src_size):
        raise ContractError(f"weight shape {w.shape} does not match maps ({out_map.src_size}, {in_map.src_size})")
    if b is not None and np.shape(b) != (out_map.src_size,):
        raise ContractError(f"bias shape {np.shape(b)} does not match out map size {out_map.src_size}")
    n_in = in_map.fold
    n_out = out_map.fold
    diagonal = strategy in ("diagonal", "noisy-diagonal")
    if diagonal and n_in != n_out:
        raise StrategyInapplicableError(f"{strategy} needs equal folds, got in={n_in}, out={n_out}")

    base = w[out_map.map][:, in_map.map]
    if diagonal:
        same = out_map.ordinals()[:, None] == in_map.ordinals()[None, :]
        w_d = np.where(same, base, np.zeros_like(base))
    else:
        w_d = base / w.dtype.type(n_in)

    std = noise_std_for(w, strategy, n_in, snr_db)
    if std > 0.0:
        if rng is None:
            raise ContractError("noisy strategies need an rng")
        free = rng.normal((out_map.dest_size, in_map.src_size, n_in - 1), std)
        noise = np.concatenate([free, -free.sum(axis=-1, keepdims=True)], axis=-1)
        w_d = w_d + noise[:, in_map.map, in_map.ordinals()].astype(w.dtype)

    b_d = None if b is None else np.asarray(b)[out_map.map]
    if return_info:
        return w_d, b_d, {"strategy": strategy, "noise_std": std}
    return w_d, b_d


def expand_embedding(e, n_e):
    """Each vocabulary row becomes n_e side-by-side copies."""
    if n_e < 1:
        raise ContractError("n_e must be >= 1")
    return np.tile(np.asarray(e), (1, n_e))


def expand_norm(gamma, beta, n):
    if n < 1:
        raise ContractError("n must be >= 1")
    return np.tile(gamma, n), (None if beta is None else np.tile(beta, n))


def expand_positional(p, n_e):
    return expand_embedding(p, n_e)


# -- configs and receipts ---------------------------------------------------


@dataclass(frozen=True)
class ExpansionConfig:
    embed_fold: int = 2
    ffn_fold: int = 2
    head_count_fold: int = 2
    head_dim_fold: int = 1
    strategy: str = "symmetric"
    snr_db: float = 10.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "strategy", normalize_strategy(self.strategy))
        for name in ("embed_fold", "ffn_fold", "head_count_fold", "head_dim_fold"):
            if int(getattr(self, name)) < 1:
                raise ContractError(f"{name} must be >= 1")
        if self.head_count_fold * self.head_dim_fold != self.embed_fold:
            raise ContractError(
                f"head_count_fold * head_dim_fold ({self.head_count_fold} * {self.head_dim_fold}) "
                f"must equal embed_fold ({self.embed_fold})"
            )
        if not math.isfinite(self.snr_db):
            raise ContractError("snr_db must be finite")

    @property
    def is_identity(self):
        return self.embed_fold == 1 and self.ffn_fold == 1

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class ReceiptEntry:
    """How one destination tensor was built.

    ``row_map``/``col_map`` describe the stored axes. For (out, in) weights
    they are the out and in maps; for the (vocab, d) lookup tables the rows
    are vocabulary ids and the columns the hidden axis.
    """

    name: str
    kind: str  # "linear", "lookup" or "vector"
    src_shape: tuple
    dst_shape: tuple
    row_map: CloneMap
    col_map: CloneMap = None
    strategy: str = "copy"
    noise_std: float = 0.0
    scale: float = 1.0
    note: str = ""

    @property
    def in_map(self):
        return self.col_map

    @property
    def out_map(self):
        return self.row_map

    def to_dict(self):
        return {
            "name": self.name,
            "kind": self.kind,
            "src_shape": list(self.src_shape),
            "dst_shape": list(self.dst_shape),
            "row_map": self.row_map.to_dict(),
            "col_map": None if self.col_map is None else self.col_map.to_dict(),
            "strategy": self.strategy,
            "noise_std": self.noise_std,
            "scale": self.scale,
            "note": self.note,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            name=d["name"],
            kind=d["kind"],
            src_shape=tuple(d["src_shape"]),
            dst_shape=tuple(d["dst_shape"]),
            row_map=CloneMap.from_dict(d["row_map"]),
            col_map=None if d["col_map"] is None else CloneMap.from_dict(d["col_map"]),
            strategy=d["strategy"],
            noise_std=d["noise_std"],
            scale=d.get("scale", 1.0),
            note=d.get("note", ""),
        )


@dataclass
class ExpansionReceipt:
    expansion: ExpansionConfig
    source_config: M.ModelConfig
    dest_config: M.ModelConfig
    entries: dict = field(default_factory=dict)

    def add(self, entry):
        if entry.name in self.entries:
            raise ContractError(f"duplicate receipt entry {entry.name}")
        self.entries[entry.name] = entry

    @property
    def residual_map(self):
        """Clone map of the residual stream (every trace snapshot)."""
        return make_clone_map(self.source_config.d_model, self.expansion.embed_fold)

    def __getitem__(self, name):
        try:
            return self.entries[name]
        except KeyError:
            raise ContractError(f"no receipt entry for tensor {name!r}") from None

    def to_dict(self):
        return {
            "expansion": self.expansion.to_dict(),
            "source_config": self.source_config.to_dict(),
            "dest_config": self.dest_config.to_dict(),
            "entries": [e.to_dict() for e in self.entries.values()],
        }

    @classmethod
    def from_dict(cls, d):
        r = cls(
            ExpansionConfig.from_dict(d["expansion"]),
            M.ModelConfig.from_dict(d["source_config"]),
            M.ModelConfig.from_dict(d["dest_config"]),
        )
        for e in d["entries"]:
            r.add(ReceiptEntry.from_dict(e))
        return r


def _fallback(strategy):
    return {"diagonal": "symmetric", "noisy-diagonal": "noisy-symmetric"}.get(strategy, strategy)


def _linear_into(out, receipt, name, bias_name, w, b, in_map, out_map, exp, rng, scale=1.0):
    strategy = exp.strategy
    note = ""
    try:
        w_d, b_d, info = expand_linear(w, b, in_map, out_map, strategy, exp.snr_db, rng.spawn(name), return_info=True)
    except StrategyInapplicableError:
        strategy = _fallback(strategy)
        note = f"fallback from {exp.strategy}: in fold {in_map.fold} != out fold {out_map.fold}"
        w_d, b_d, info = expand_linear(w, b, in_map, out_map, strategy, exp.snr_db, rng.spawn(name), return_info=True)
    if scale != 1.0:
        w_d = w_d * w_d.dtype.type(scale)
        if b_d is not None:
            b_d = b_d * b_d.dtype.type(scale)
    out[name] = w_d
    receipt.add(ReceiptEntry(name, "linear", w.shape, w_d.shape, out_map, in_map, info["strategy"], info["noise_std"], scale, note))
    if bias_name is not None and b is not None:
        out[bias_name] = b_d
        receipt.add(ReceiptEntry(bias_name, "vector", b.shape, b_d.shape, out_map, None, "copy", 0.0, scale))


def _norm_into(out, receipt, params, prefix, n, d_src):
    g = params[f"{prefix}.gamma"]
    beta = params.get(f"{prefix}.beta")
    g_d, b_d = expand_norm(g, beta, n)
    m = make_clone_map(d_src, n)
    out[f"{prefix}.gamma"] = g_d
    receipt.add(ReceiptEntry(f"{prefix}.gamma", "vector", g.shape, g_d.shape, m))
    if beta is not None:
        out[f"{prefix}.beta"] = b_d
        receipt.add(ReceiptEntry(f"{prefix}.beta", "vector", beta.shape, b_d.shape, m))


def expand_attention(params, config, expansion, block, rng, out=None, receipt=None):
    """Expand block ``block``'s attention weights into ``out``.

    Queries, keys and values map the stacked residual stream onto the
    cloned head layout; the query weights and bias are then scaled by
    1 / sqrt(head_dim_fold) so the scores keep their source values under the
    destination's 1 / sqrt(d_head) scaling.
    """
    exp = expansion
    if exp.head_count_fold * exp.head_dim_fold != exp.embed_fold:
        raise ContractError("head_count_fold * head_dim_fold must equal embed_fold")
    out = {} if out is None else out
    if receipt is None:
        receipt = ExpansionReceipt(exp, config, config)
    resid = make_clone_map(config.d_model, exp.embed_fold)
    heads = make_head_clone_map(config.n_heads, config.d_head, exp.head_count_fold, exp.head_dim_fold)
    p = f"blocks.{block}.attn"
    bias = (lambda n: params[n]) if config.has_bias else (lambda n: None)
    q_scale = 1.0 / math.sqrt(exp.head_dim_fold)
    for w in ("q", "k", "v"):
        _linear_into(out, receipt, f"{p}.w_{w}", f"{p}.b_{w}", params[f"{p}.w_{w}"], bias(f"{p}.b_{w}"),
                     resid, heads, exp, rng, q_scale if w == "q" else 1.0)
    _linear_into(out, receipt, f"{p}.w_o", f"{p}.b_o", params[f"{p}.w_o"], bias(f"{p}.b_o"), heads, resid, exp, rng)
    return out


def expand_config(config, expansion):
    exp = expansion
    return config.replace(
        n_heads=config.n_heads * exp.head_count_fold,
        d_model=config.d_model * exp.embed_fold,
        d_head=config.d_head * exp.head_dim_fold,
        d_ffn=config.d_ffn * exp.ffn_fold,
        rotary_fold=config.rotary_fold * exp.head_dim_fold,
        tied_unembedding=config.tied_unembedding and exp.embed_fold == 1,
    )


def expand_model(params, config, expansion):
    """Expand every tensor; returns (params_dest, config_dest, receipt).

    A tied unembedding cannot stay tied when the hidden size grows (the
    lookup needs copies of E, the output projection needs copies of E / n),
    so the destination gets an untied unembedding built from E. That is
    only allowed for the noise-free strategies.
    """
    M.check_params(params, config)
    exp = expansion
    n_e, n_f = exp.embed_fold, exp.ffn_fold
    if config.tied_unembedding and n_e > 1 and exp.strategy.startswith("noisy"):
        raise StrategyInapplicableError("a tied unembedding only admits noise-free strategies")
    dest_config = expand_config(config, exp)
    receipt = ExpansionReceipt(exp, config, dest_config)
    rng = Rng(exp.seed)
    d, f, v = config.d_model, config.d_ffn, config.vocab_size
    resid = make_clone_map(d, n_e)
    hid = make_clone_map(f, n_f)
    out = {}

    e = params["embedding"]
    out["embedding"] = expand_embedding(e, n_e)
    receipt.add(ReceiptEntry("embedding", "lookup", e.shape, out["embedding"].shape, identity_map(v), resid))
    if config.pos_kind == "learned":
        pe = params["pos_embedding"]
        out["pos_embedding"] = expand_positional(pe, n_e)
        receipt.add(ReceiptEntry("pos_embedding", "lookup", pe.shape, out["pos_embedding"].shape,
                                 identity_map(config.max_seq), resid))

    bias = (lambda n: params[n]) if config.has_bias else (lambda n: None)
    for i in range(config.n_layers):
        p = f"blocks.{i}"
        _norm_into(out, receipt, params, f"{p}.attn_norm", n_e, d)
        expand_attention(params, config, exp, i, rng, out, receipt)
        _norm_into(out, receipt, params, f"{p}.ffn_norm", n_e, d)
        _linear_into(out, receipt, f"{p}.ffn.w_up", f"{p}.ffn.b_up", params[f"{p}.ffn.w_up"], bias(f"{p}.ffn.b_up"),
                     resid, hid, exp, rng)
        _linear_into(out, receipt, f"{p}.ffn.w_down", f"{p}.ffn.b_down", params[f"{p}.ffn.w_down"],
                     bias(f"{p}.ffn.b_down"), hid, resid, exp, rng)
    _norm_into(out, receipt, params, "final_norm", n_e, d)

    if not dest_config.tied_unembedding:
        w_u = params["embedding"] if config.tied_unembedding else params["unembedding"]
        _linear_into(out, receipt, "unembedding", None, w_u, None, resid, identity_map(v), exp, rng)
        if config.tied_unembedding:
            receipt.entries["unembedding"].note = "untied from the source embedding"

    M.check_params(out, dest_config)
    return out, dest_config, receipt


def master_residual(entry, src, dst):
    """Largest violation of the cloning constraint for one tensor.

    Linear weights: row-block sums over each column's copies must equal
    scale * W_src[row_map]. Lookups and vectors: plain copies (times scale).
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if dst.shape != tuple(entry.dst_shape) or src.shape != tuple(entry.src_shape):
        raise ContractError(f"{entry.name}: shapes {src.shape}->{dst.shape} disagree with receipt")
    if entry.kind == "vector":
        return float(np.max(np.abs(dst - entry.scale * src[entry.row_map.map]), initial=0.0))
    if entry.kind == "lookup":
        expect = src[entry.row_map.map][:, entry.col_map.map]
        return float(np.max(np.abs(dst - expect), initial=0.0))
    sums = np.zeros((dst.shape[0], entry.col_map.src_size))
    np.add.at(sums.T, entry.col_map.map, dst.T)
    return float(np.max(np.abs(sums - entry.scale * src[entry.row_map.map]), initial=0.0))
