"""Decoder-only transformer: config, parameters, forward pass.

Parameters live in a flat ``dict[str, np.ndarray]``. Linear weights are
stored (out_features, in_features) and applied as ``x @ w.T``. Blocks are
pre-norm::

    x = x + attn(norm(x))
    x = x + ffn(norm(x))

followed by a final norm and the unembedding.
"""

import math
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import tensor as T
from .errors import ContractError

POS_KINDS = ("learned", "rotary")
NORM_KINDS = ("layer", "rms")


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    n_heads: int
    d_model: int
    d_head: int
    d_ffn: int
    vocab_size: int
    max_seq: int
    pos_kind: str = "learned"
    norm_kind: str = "layer"
    has_bias: bool = True
    activation: str = "gelu"
    dropout_p: float = 0.0
    tied_unembedding: bool = False
    # number of duplicated sub-blocks per head that share one rotary ladder
    rotary_fold: int = 1
    rotary_base: float = 10000.0
    norm_eps: float = 1e-5

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "d_model", "d_head", "d_ffn", "vocab_size", "max_seq", "rotary_fold"):
            if int(getattr(self, name)) < 1:
                raise ContractError(f"{name} must be >= 1")
        if self.n_heads * self.d_head != self.d_model:
            raise ContractError(
                f"d_model ({self.d_model}) must equal n_heads * d_head ({self.n_heads} * {self.d_head})"
            )
        if self.pos_kind not in POS_KINDS:
            raise ContractError(f"pos_kind must be one of {POS_KINDS}")
        if self.norm_kind not in NORM_KINDS:
            raise ContractError(f"norm_kind must be one of {NORM_KINDS}")
        if self.activation != "gelu":
            raise ContractError("only the gelu activation is supported")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ContractError("dropout_p must be in [0, 1)")
        if self.pos_kind == "rotary" and self.d_head % (2 * self.rotary_fold):
            raise ContractError("rotary needs d_head divisible by 2 * rotary_fold")
        if self.norm_eps <= 0:
            raise ContractError("norm_eps must be positive")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def replace(self, **changes):
        return replace(self, **changes)


def _preset(L, H, d, ffn, vocab, seq, **kw):
    return ModelConfig(n_layers=L, n_heads=H, d_model=d, d_head=d // H, d_ffn=ffn, vocab_size=vocab, max_seq=seq, **kw)


PRESETS = {
    # desk-scale
    "tiny": _preset(2, 2, 8, 16, 11, 5),
    "micro": _preset(2, 4, 32, 64, 256, 64),
    "micro-rotary": _preset(2, 4, 32, 64, 256, 64, pos_kind="rotary"),
    "micro-wide": _preset(2, 8, 64, 128, 256, 64),
    # published base/target shapes, GELU-only and untied
    "opt-350m": _preset(24, 16, 1024, 4096, 50272, 2048),
    "opt-1.3b": _preset(24, 32, 2048, 8192, 50272, 2048),
    "pythia-410m": _preset(24, 16, 1024, 4096, 50304, 2048, pos_kind="rotary"),
    "pythia-1.4b": _preset(24, 32, 2048, 8192, 50304, 2048, pos_kind="rotary"),
    "olmo-1b": _preset(16, 16, 2048, 16384, 50280, 2048, pos_kind="rotary", has_bias=False),
    "olmo-2.9b": _preset(16, 32, 4096, 16384, 50280, 2048, pos_kind="rotary", has_bias=False),
}


def get_preset(name):
    try:
        return PRESETS[name.lower()]
    except KeyError:
        raise ContractError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def _norm_names(prefix, config):
    names = [f"{prefix}.gamma"]
    if config.norm_kind == "layer":
        names.append(f"{prefix}.beta")
    return names


def n_params(config):
    return int(sum(math.prod(s) for s in param_shapes(config).values()))


def param_shapes(config):
    """Ordered mapping of parameter name to shape."""
    c = config
    d, f, v = c.d_model, c.d_ffn, c.vocab_size
    shapes = {"embedding": (v, d)}
    if c.pos_kind == "learned":
        shapes["pos_embedding"] = (c.max_seq, d)
    for i in range(c.n_layers):
        p = f"blocks.{i}"
        for n in _norm_names(f"{p}.attn_norm", c):
            shapes[n] = (d,)
        for w in ("q", "k", "v", "o"):
            shapes[f"{p}.attn.w_{w}"] = (d, d)
            if c.has_bias:
                shapes[f"{p}.attn.b_{w}"] = (d,)
        for n in _norm_names(f"{p}.ffn_norm", c):
            shapes[n] = (d,)
        shapes[f"{p}.ffn.w_up"] = (f, d)
        if c.has_bias:
            shapes[f"{p}.ffn.b_up"] = (f,)
        shapes[f"{p}.ffn.w_down"] = (d, f)
        if c.has_bias:
            shapes[f"{p}.ffn.b_down"] = (d,)
    for n in _norm_names("final_norm", c):
        shapes[n] = (d,)
    if not c.tied_unembedding:
        shapes["unembedding"] = (v, d)
    return shapes


def is_decay_exempt(name):
    """Norm parameters and biases get no weight decay."""
    leaf = name.rsplit(".", 1)[-1]
    return leaf in ("gamma", "beta") or leaf.startswith("b_")


def check_params(params, config):
    shapes = param_shapes(config)
    missing = set(shapes) - set(params)
    extra = set(params) - set(shapes)
    if missing or extra:
        raise ContractError(f"parameter set mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
    for name, shape in shapes.items():
        if tuple(params[name].shape) != shape:
            raise ContractError(f"{name}: expected shape {shape}, got {params[name].shape}")


def init_random(config, rng, dtype=np.float64):
    """Glorot-normal weights, zero biases and betas, unit gammas."""
    params = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gamma":
            params[name] = np.ones(shape, dtype=dtype)
        elif leaf == "beta" or leaf.startswith("b_"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            std = np.sqrt(2.0 / (shape[0] + shape[1]))
            params[name] = rng.normal(shape, std, dtype)
    return params


def cast_params(params, dtype):
    return {k: np.asarray(v, dtype=dtype) for k, v in params.items()}


def params_dtype(params):
    dts = {v.dtype for v in params.values()}
    if len(dts) != 1:
        raise ContractError(f"mixed parameter dtypes: {sorted(map(str, dts))}")
    return dts.pop()


# -- rotary ---------------------------------------------------------------


def rotary_tables(positions, d_head, head_dim_fold=1, base=10000.0):
    """cos/sin tables of shape (T, d_src // 2) for the source ladder."""
    if d_head % (2 * head_dim_fold):
        raise ContractError(f"d_head={d_head} not divisible by 2 * head_dim_fold={2 * head_dim_fold}")
    d_src = d_head // head_dim_fold
    half = d_src // 2
    inv_freq = base ** (-np.arange(half, dtype=np.float64) * 2.0 / d_src)
    ang = np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]
    return np.cos(ang), np.sin(ang)


def _rotate(x, cos, sin, head_dim_fold, inverse=False):
    *lead, t, d_head = x.shape
    d_src = d_head // head_dim_fold
    half = d_src // 2
    xs = x.reshape(*lead, t, head_dim_fold, 2, half)
    x1 = xs[..., 0, :]
    x2 = xs[..., 1, :]
    c = cos[:, None, :].astype(x.dtype)
    s = sin[:, None, :].astype(x.dtype)
    if inverse:
        s = -s
    out = np.empty_like(xs)
    out[..., 0, :] = x1 * c - x2 * s
    out[..., 1, :] = x1 * s + x2 * c
    return out.reshape(x.shape)


def rotary_apply(x, positions, head_dim_fold=1, base=10000.0):
    """Rotate per-head vectors ``x`` of shape (..., T, d_head).

    Each of the ``head_dim_fold`` sub-blocks of a head is rotated with the
    ladder of a d_head // head_dim_fold head (half-split pairing), so a head
    holding k stacked copies of a source head rotates each copy exactly like
    the source head.
    """
    x = np.asarray(x)
    cos, sin = rotary_tables(positions, x.shape[-1], head_dim_fold, base)
    return _rotate(x, cos, sin, head_dim_fold)


def rotary_apply_grad(dy, positions, head_dim_fold=1, base=10000.0):
    cos, sin = rotary_tables(positions, dy.shape[-1], head_dim_fold, base)
    return _rotate(dy, cos, sin, head_dim_fold, inverse=True)


# -- forward --------------------------------------------------------------


@dataclass
class ForwardTrace:
    logits: np.ndarray
    hidden: dict


def snapshot_names(config):
    names = ["embed"]
    for i in range(config.n_layers):
        names += [f"blocks.{i}.attn", f"blocks.{i}.ffn"]
    names.append("final_norm")
    return names


def _check_tokens(tokens, config):
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.ndim != 2 or tokens.shape[1] < 1:
        raise ContractError(f"tokens must be a non-empty (T,) or (B, T) array, got shape {tokens.shape}")
    if not np.issubdtype(tokens.dtype, np.integer):
        raise ContractError("token ids must be integers")
    if tokens.shape[1] > config.max_seq:
        raise ContractError(f"sequence length {tokens.shape[1]} exceeds max_seq {config.max_seq}")
    if tokens.min() < 0 or tokens.max() >= config.vocab_size:
        raise ContractError(f"token id out of range [0, {config.vocab_size})")
    return tokens.astype(np.int64)


def norm_forward(x, params, prefix, config):
    """Returns (y, cache) where cache holds what the backward pass needs."""
    gamma = params[f"{prefix}.gamma"]
    eps = config.norm_eps
    if config.norm_kind == "layer":
        d = x - T.row_mean(x)[..., None]
        inv = 1.0 / np.sqrt(T.row_mean(d * d) + eps)
        xhat = d * inv[..., None]
        y = xhat * gamma + params[f"{prefix}.beta"]
    else:
        inv = 1.0 / np.sqrt(T.row_mean(x * x) + eps)
        xhat = x * inv[..., None]
        y = xhat * gamma
    return y, (xhat, inv)


def _dropout(x, p, rng):
    keep = rng.uniform(x.shape, dtype=x.dtype) >= p
    scale = x.dtype.type(1.0 / (1.0 - p))
    mask = keep * scale
    return x * mask, mask


def _split_heads(x, n_heads):
    b, t, d = x.shape
    return np.ascontiguousarray(x.reshape(b, t, n_heads, d // n_heads).transpose(0, 2, 1, 3))


def _merge_heads(x):
    b, h, t, dh = x.shape
    return np.ascontiguousarray(x.transpose(0, 2, 1, 3).reshape(b, t, h * dh))


def run(params, config, tokens, train=False, rng=None, keep_cache=False):
    """Shared forward implementation; returns (logits, hidden, cache)."""
    tokens = _check_tokens(tokens, config)
    dropout = train and config.dropout_p > 0.0
    if dropout and rng is None:
        raise ContractError("train-mode forward with dropout needs an rng")
    c = config
    b, t = tokens.shape
    positions = np.arange(t)
    hidden = {}
    cache = {"tokens": tokens, "blocks": []} if keep_cache else None

    x = params["embedding"][tokens]
    if c.pos_kind == "learned":
        x = x + params["pos_embedding"][:t]
    hidden["embed"] = x

    if c.pos_kind == "rotary":
        cos, sin = rotary_tables(positions, c.d_head, c.rotary_fold, c.rotary_base)
    causal = np.triu(np.ones((t, t), dtype=bool), k=1)
    score_scale = x.dtype.type(1.0 / np.sqrt(c.d_head))

    for i in range(c.n_layers):
        p = f"blocks.{i}"
        bias = (lambda n: params[n]) if c.has_bias else (lambda n: None)
        a_in, n1 = norm_forward(x, params, f"{p}.attn_norm", c)
        q = T.linear(a_in, params[f"{p}.attn.w_q"], bias(f"{p}.attn.b_q"))
        k = T.linear(a_in, params[f"{p}.attn.w_k"], bias(f"{p}.attn.b_k"))
        v = T.linear(a_in, params[f"{p}.attn.w_v"], bias(f"{p}.attn.b_v"))
        qh, kh, vh = (_split_heads(z, c.n_heads) for z in (q, k, v))
        if c.pos_kind == "rotary":
            qh = _rotate(qh, cos, sin, c.rotary_fold)
            kh = _rotate(kh, cos, sin, c.rotary_fold)
        scores = T.bmm(qh, np.ascontiguousarray(kh.swapaxes(-1, -2))) * score_scale
        scores[..., causal] = -np.inf
        probs = T.softmax_rows(scores)
        probs_used, attn_mask = _dropout(probs, c.dropout_p, rng) if dropout else (probs, None)
        ctx = _merge_heads(T.bmm(probs_used, vh))
        attn_out = T.linear(ctx, params[f"{p}.attn.w_o"], bias(f"{p}.attn.b_o"))
        x1 = x + attn_out
        hidden[f"{p}.attn"] = x1

        f_in, n2 = norm_forward(x1, params, f"{p}.ffn_norm", c)
        u = T.linear(f_in, params[f"{p}.ffn.w_up"], bias(f"{p}.ffn.b_up"))
        g = T.gelu(u)
        f = T.linear(g, params[f"{p}.ffn.w_down"], bias(f"{p}.ffn.b_down"))
        f_used, ffn_mask = _dropout(f, c.dropout_p, rng) if dropout else (f, None)
        x2 = x1 + f_used
        hidden[f"{p}.ffn"] = x2

        if keep_cache:
            cache["blocks"].append(
                dict(x=x, a_in=a_in, n1=n1, qh=qh, kh=kh, vh=vh, probs=probs, attn_mask=attn_mask,
                     ctx=ctx, x1=x1, f_in=f_in, n2=n2, u=u, g=g, ffn_mask=ffn_mask)
            )
        x = x2

    xf, nf = norm_forward(x, params, "final_norm", c)
    hidden["final_norm"] = xf
    w_out = params["embedding"] if c.tied_unembedding else params["unembedding"]
    logits = T.linear(xf, w_out)
    if keep_cache:
        cache.update(x_final_in=x, nf=nf, xf=xf)
        if c.pos_kind == "rotary":
            cache["rotary"] = (cos, sin)
    return logits, hidden, cache


def forward(params, config, tokens, mode="eval", rng=None):
    """Run the model on ``tokens`` ((T,) or (B, T) ints); returns a ForwardTrace.

    Dropout only applies in ``mode="train"`` and then draws from ``rng``.
    Snapshots in ``hidden`` keep the batch axis; 1-D input gives B == 1.
    """
    if mode not in ("train", "eval"):
        raise ContractError(f"mode must be 'train' or 'eval', got {mode!r}")
    logits, hidden, _ = run(params, config, tokens, train=(mode == "train"), rng=rng)
    return ForwardTrace(logits=logits, hidden=hidden)


def attention_probs(params, config, tokens):
    """Per-layer eval-mode attention probabilities, each (B, H, T, T)."""
    _, _, cache = run(params, config, tokens, keep_cache=True)
    return [blk["probs"] for blk in cache["blocks"]]
