import math

import numpy as np
import pytest

from hypercloning import model as M
from hypercloning.errors import ContractError
from hypercloning.tensor import Rng


def ref_norm(x, gamma, beta, kind, eps):
    if kind == "layer":
        mu = sum(x) / len(x)
        var = sum((v - mu) ** 2 for v in x) / len(x)
        return [(v - mu) / math.sqrt(var + eps) * g + b for v, g, b in zip(x, gamma, beta)]
    ms = sum(v * v for v in x) / len(x)
    return [v / math.sqrt(ms + eps) * g for v, g in zip(x, gamma)]


def ref_gelu(v):
    return 0.5 * v * (1 + math.tanh(math.sqrt(2 / math.pi) * (v + 0.044715 * v**3)))


def ref_affine(w, b, x):
    return [sum(w[r][c] * x[c] for c in range(len(x))) + (b[r] if b is not None else 0.0) for r in range(len(w))]


def ref_rotate(vec, pos, fold, base):
    """Half-split rotary on each of ``fold`` sub-blocks, via complex multiplication."""
    d = len(vec) // fold
    half = d // 2
    out = []
    for blk in range(fold):
        sub = vec[blk * d : (blk + 1) * d]
        z = [complex(sub[i], sub[i + half]) * complex(math.cos(pos * base ** (-2 * i / d)),
                                                        math.sin(pos * base ** (-2 * i / d))) for i in range(half)]
        out += [w.real for w in z] + [w.imag for w in z]
    return out


def reference_forward(params, c, tokens):
    """Scalar-loop forward for one sequence; returns (logits, snapshots)."""
    P = {k: v.tolist() for k, v in params.items()}
    get = lambda n: P.get(n) if c.has_bias else None  # noqa: E731
    beta = lambda n: P[n] if c.norm_kind == "layer" else [0.0] * c.d_model  # noqa: E731
    T_ = len(tokens)
    xs = []
    for t, tok in enumerate(tokens):
        x = list(P["embedding"][tok])
        if c.pos_kind == "learned":
            x = [a + b for a, b in zip(x, P["pos_embedding"][t])]
        xs.append(x)
    snaps = {"embed": [list(x) for x in xs]}
    for i in range(c.n_layers):
        p = f"blocks.{i}"
        a = [ref_norm(x, P[f"{p}.attn_norm.gamma"], beta(f"{p}.attn_norm.beta"), c.norm_kind, c.norm_eps) for x in xs]
        q = [ref_affine(P[f"{p}.attn.w_q"], get(f"{p}.attn.b_q"), v) for v in a]
        k = [ref_affine(P[f"{p}.attn.w_k"], get(f"{p}.attn.b_k"), v) for v in a]
        v_ = [ref_affine(P[f"{p}.attn.w_v"], get(f"{p}.attn.b_v"), v) for v in a]
        ctx = [[0.0] * c.d_model for _ in range(T_)]
        for h in range(c.n_heads):
            sl = slice(h * c.d_head, (h + 1) * c.d_head)
            qh = [q[t][sl] for t in range(T_)]
            kh = [k[t][sl] for t in range(T_)]
            if c.pos_kind == "rotary":
                qh = [ref_rotate(qh[t], t, c.rotary_fold, c.rotary_base) for t in range(T_)]
                kh = [ref_rotate(kh[t], t, c.rotary_fold, c.rotary_base) for t in range(T_)]
            for t in range(T_):
                s = [sum(x * y for x, y in zip(qh[t], kh[u])) / math.sqrt(c.d_head) for u in range(t + 1)]
                mx = max(s)
                e = [math.exp(z - mx) for z in s]
                z = sum(e)
                for j in range(c.d_head):
                    ctx[t][h * c.d_head + j] = sum(e[u] / z * v_[u][h * c.d_head + j] for u in range(t + 1))
        xs = [[x + y for x, y in zip(xs[t], ref_affine(P[f"{p}.attn.w_o"], get(f"{p}.attn.b_o"), ctx[t]))]
              for t in range(T_)]
        snaps[f"{p}.attn"] = [list(x) for x in xs]
        f = [ref_norm(x, P[f"{p}.ffn_norm.gamma"], beta(f"{p}.ffn_norm.beta"), c.norm_kind, c.norm_eps) for x in xs]
        u = [[ref_gelu(z) for z in ref_affine(P[f"{p}.ffn.w_up"], get(f"{p}.ffn.b_up"), v)] for v in f]
        xs = [[x + y for x, y in zip(xs[t], ref_affine(P[f"{p}.ffn.w_down"], get(f"{p}.ffn.b_down"), u[t]))]
              for t in range(T_)]
        snaps[f"{p}.ffn"] = [list(x) for x in xs]
    xf = [ref_norm(x, P["final_norm.gamma"], beta("final_norm.beta"), c.norm_kind, c.norm_eps) for x in xs]
    snaps["final_norm"] = xf
    w_out = P["embedding"] if c.tied_unembedding else P["unembedding"]
    logits = [ref_affine(w_out, None, x) for x in xf]
    return np.array(logits), {k: np.array(v) for k, v in snaps.items()}


def _randomized(config, seed):
    params = M.init_random(config, Rng(seed), np.float64)
    g = np.random.default_rng(seed)
    for k in params:
        if k.endswith(".gamma"):
            params[k] = 1.0 + 0.3 * g.standard_normal(params[k].shape)
        elif k.endswith(".beta") or ".b_" in k:
            params[k] = 0.2 * g.standard_normal(params[k].shape)
    return params


VARIANTS = [
    dict(),
    dict(pos_kind="rotary"),
    dict(norm_kind="rms"),
    dict(has_bias=False),
    dict(tied_unembedding=True),
    dict(pos_kind="rotary", norm_kind="rms", has_bias=False, d_head=4, n_heads=2),
]


@pytest.mark.parametrize("overrides", VARIANTS, ids=lambda d: "-".join(f"{k}={v}" for k, v in d.items()) or "base")
def test_forward_matches_scalar_reference(overrides):
    config = M.get_preset("tiny").replace(**overrides)
    params = _randomized(config, 3)
    tokens = [1, 4, 4, 0, 10]
    trace = M.forward(params, config, np.array(tokens))
    logits, snaps = reference_forward(params, config, tokens)
    np.testing.assert_allclose(trace.logits[0], logits, rtol=0, atol=1e-10)
    for name in M.snapshot_names(config):
        np.testing.assert_allclose(trace.hidden[name][0], snaps[name], rtol=0, atol=1e-10)


def test_rotary_fold_matches_reference():
    config = M.get_preset("tiny").replace(pos_kind="rotary", n_heads=1, d_head=8, rotary_fold=2)
    params = _randomized(config, 5)
    tokens = [2, 3, 5, 7]
    logits, _ = reference_forward(params, config, tokens)
    np.testing.assert_allclose(M.forward(params, config, tokens).logits[0], logits, atol=1e-10)


def test_rotary_preserves_norm_and_relative_position(rng):
    x = rng.standard_normal((1, 6, 8))
    y = M.rotary_apply(x, np.arange(6))
    np.testing.assert_allclose(np.linalg.norm(y, axis=-1), np.linalg.norm(x, axis=-1), rtol=1e-14)
    # <R_m q, R_n k> depends only on n - m
    q = rng.standard_normal(8)
    k = rng.standard_normal(8)
    def dot(m, n):
        return float(M.rotary_apply(q[None, :], [m])[0] @ M.rotary_apply(k[None, :], [n])[0])
    assert math.isclose(dot(1, 4), dot(5, 8), rel_tol=1e-12)
    assert np.allclose(M.rotary_apply(x, np.zeros(6, dtype=int)), x)


def test_rotary_grad_is_transpose(rng):
    x = rng.standard_normal((5, 8))
    dy = rng.standard_normal((5, 8))
    pos = np.arange(5)
    lhs = np.sum(M.rotary_apply(x, pos) * dy)
    rhs = np.sum(x * M.rotary_apply_grad(dy, pos))
    assert math.isclose(lhs, rhs, rel_tol=1e-13)


def test_causality(micro):
    config, params = micro
    g = np.random.default_rng(0)
    a = g.integers(0, 256, 20)
    b = a.copy()
    b[12:] = g.integers(0, 256, 8)
    la = M.forward(params, config, a).logits[0]
    lb = M.forward(params, config, b).logits[0]
    assert np.array_equal(la[:12], lb[:12])
    assert not np.allclose(la[12:], lb[12:])


def test_batch_rows_are_independent(micro):
    config, params = micro
    g = np.random.default_rng(1)
    toks = g.integers(0, 256, (3, 10))
    batched = M.forward(params, config, toks).logits
    for i in range(3):
        assert np.array_equal(batched[i], M.forward(params, config, toks[i]).logits[0])


def test_eval_ignores_dropout_and_train_uses_it(micro):
    config, params = micro
    cfg = config.replace(dropout_p=0.5)
    toks = np.arange(10)
    base = M.forward(params, config, toks).logits
    assert np.array_equal(M.forward(params, cfg, toks).logits, base)
    a = M.forward(params, cfg, toks, mode="train", rng=Rng(1)).logits
    b = M.forward(params, cfg, toks, mode="train", rng=Rng(1)).logits
    assert np.array_equal(a, b)
    assert not np.allclose(a, base)
    with pytest.raises(ContractError):
        M.forward(params, cfg, toks, mode="train")


def test_attention_probs_causal_and_normalized(micro):
    config, params = micro
    probs = M.attention_probs(params, config, np.arange(9))
    assert len(probs) == config.n_layers
    for p in probs:
        assert p.shape == (1, config.n_heads, 9, 9)
        np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-14)
        assert np.all(np.triu(p[0, 0], k=1) == 0)


@pytest.mark.parametrize(
    "tokens",
    [np.array([]), np.array([0, 300]), np.array([-1]), np.arange(70), np.array([0.5, 1.0])],
)
def test_token_contract(micro, tokens):
    config, params = micro
    with pytest.raises(ContractError):
        M.forward(params, config, tokens)


def test_config_validation():
    with pytest.raises(ContractError):
        M.get_preset("tiny").replace(d_model=9)
    with pytest.raises(ContractError):
        M.get_preset("tiny").replace(pos_kind="alibi")
    with pytest.raises(ContractError):
        M.get_preset("tiny").replace(pos_kind="rotary", d_head=3, n_heads=1)
    with pytest.raises(ContractError):
        M.get_preset("nope")


def test_config_roundtrip():
    for name in M.PRESETS:
        c = M.get_preset(name)
        assert M.ModelConfig.from_dict(c.to_dict()) == c


@pytest.mark.parametrize(
    "name,n_params",
    [("opt-350m", None), ("opt-1.3b", None)],
)
def test_published_presets_shapes(name, n_params):
    c = M.get_preset(name)
    shapes = M.param_shapes(c)
    assert shapes["blocks.0.ffn.w_up"] == (c.d_ffn, c.d_model)
    assert shapes["unembedding"] == (c.vocab_size, c.d_model)
    assert c.d_head * c.n_heads == c.d_model


def test_param_count_of_tiny():
    # embedding 11x8, pos 5x8, per block: 2 norms (16 each), qkvo 4*(64+8), ffn 16*8+16 + 8*16+8, final 16, unembed 88
    block = 2 * 16 + 4 * (64 + 8) + (128 + 16) + (128 + 8)
    assert M.n_params(M.get_preset("tiny")) == 88 + 40 + 2 * block + 16 + 88


def test_init_random_statistics_and_checks():
    c = M.get_preset("micro")
    p = M.init_random(c, Rng(0), np.float32)
    assert M.params_dtype(p) == np.float32
    w = p["blocks.0.ffn.w_up"].astype(np.float64)
    assert abs(w.std() - math.sqrt(2 / (64 + 32))) < 0.01
    assert np.all(p["blocks.0.attn_norm.gamma"] == 1) and np.all(p["blocks.0.attn.b_q"] == 0)
    M.check_params(p, c)
    bad = dict(p)
    bad["blocks.0.ffn.w_up"] = bad["blocks.0.ffn.w_up"][:, :3]
    with pytest.raises(ContractError):
        M.check_params(bad, c)
    assert all(np.array_equal(p[k], M.init_random(c, Rng(0), np.float32)[k]) for k in p)
