"""Reverse-mode gradients of the next-token cross-entropy.

Walks the cache left by ``model.run(..., keep_cache=True)`` backwards.
All reductions go through the deterministic tensor kernels, so two
bitwise-identical parameter entries fed bitwise-identical activations get
bitwise-identical gradients.
"""

import numpy as np

from . import model as M
from . import tensor as T


def _linear_back(dy, x, w, grads, w_name, b_name=None):
    """y = x @ w.T + b; accumulates dw (and db), returns dx."""
    dy2 = dy.reshape(-1, dy.shape[-1])
    x2 = x.reshape(-1, x.shape[-1])
    grads[w_name] = T.matmul(np.ascontiguousarray(dy2.T), x2)
    if b_name is not None:
        grads[b_name] = dy2.sum(axis=0)
    return T.matmul(dy2, w).reshape(x.shape[:-1] + (w.shape[1],))


def _norm_back(dy, stats, params, prefix, config, grads):
    xhat, inv = stats
    gamma = params[f"{prefix}.gamma"]
    flat_dy = dy.reshape(-1, dy.shape[-1])
    grads[f"{prefix}.gamma"] = (flat_dy * xhat.reshape(flat_dy.shape)).sum(axis=0)
    g = dy * gamma
    if config.norm_kind == "layer":
        grads[f"{prefix}.beta"] = flat_dy.sum(axis=0)
        dx = inv[..., None] * (g - T.row_mean(g)[..., None] - xhat * T.row_mean(g * xhat)[..., None])
    else:
        dx = inv[..., None] * (g - xhat * T.row_mean(g * xhat)[..., None])
    return dx


def cross_entropy(logits, targets):
    """Mean next-token cross-entropy and its gradient w.r.t. the logits."""
    flat = logits.reshape(-1, logits.shape[-1])
    tgt = np.asarray(targets).reshape(-1)
    shifted = flat - flat.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = T.row_sum(e)
    logp = shifted[np.arange(tgt.size), tgt] - np.log(s)
    n = tgt.size
    loss = float(-T.row_sum(logp[None, :].astype(np.float64))[0] / n)
    d = e / s[:, None]
    d[np.arange(n), tgt] -= 1.0
    d /= d.dtype.type(n)
    return loss, d.reshape(logits.shape)


def loss_only(params, config, inputs, targets):
    logits, _, _ = M.run(params, config, inputs)
    return cross_entropy(logits, targets)[0]


def backward(params, config, cache, dlogits):
    c = config
    grads = {}
    xf = cache["xf"]
    w_out_name = "embedding" if c.tied_unembedding else "unembedding"
    dl2 = dlogits.reshape(-1, dlogits.shape[-1])
    d_wout = T.matmul(np.ascontiguousarray(dl2.T), xf.reshape(-1, xf.shape[-1]))
    dx = T.matmul(dl2, params[w_out_name]).reshape(xf.shape)
    dx = _norm_back(dx, cache["nf"], params, "final_norm", c, grads)

    positions = np.arange(cache["tokens"].shape[1])
    inv_scale = dx.dtype.type(1.0 / np.sqrt(c.d_head))
    for i in reversed(range(c.n_layers)):
        p = f"blocks.{i}"
        blk = cache["blocks"][i]
        bname = (lambda n: n) if c.has_bias else (lambda n: None)

        # ffn: x2 = x1 + drop(w_down gelu(w_up norm(x1)))
        df = dx if blk["ffn_mask"] is None else dx * blk["ffn_mask"]
        dg = _linear_back(df, blk["g"], params[f"{p}.ffn.w_down"], grads, f"{p}.ffn.w_down", bname(f"{p}.ffn.b_down"))
        du = dg * T.gelu_grad(blk["u"])
        df_in = _linear_back(du, blk["f_in"], params[f"{p}.ffn.w_up"], grads, f"{p}.ffn.w_up", bname(f"{p}.ffn.b_up"))
        dx = dx + _norm_back(df_in, blk["n2"], params, f"{p}.ffn_norm", c, grads)

        # attention: x1 = x + w_o ctx
        dctx = _linear_back(dx, blk["ctx"], params[f"{p}.attn.w_o"], grads, f"{p}.attn.w_o", bname(f"{p}.attn.b_o"))
        dctx_h = M._split_heads(dctx, c.n_heads)
        probs = blk["probs"]
        mask = blk["attn_mask"]
        probs_used = probs if mask is None else probs * mask
        dv = T.bmm(np.ascontiguousarray(probs_used.swapaxes(-1, -2)), dctx_h)
        dprobs = T.bmm(dctx_h, np.ascontiguousarray(blk["vh"].swapaxes(-1, -2)))
        if mask is not None:
            dprobs = dprobs * mask
        dscores = probs * (dprobs - T.row_sum(dprobs * probs)[..., None])
        dscores = dscores * inv_scale
        dq = T.bmm(dscores, blk["kh"])
        dk = T.bmm(np.ascontiguousarray(dscores.swapaxes(-1, -2)), blk["qh"])
        if c.pos_kind == "rotary":
            cos, sin = cache["rotary"]
            dq = M._rotate(dq, cos, sin, c.rotary_fold, inverse=True)
            dk = M._rotate(dk, cos, sin, c.rotary_fold, inverse=True)
        a_in = blk["a_in"]
        da = _linear_back(M._merge_heads(dq), a_in, params[f"{p}.attn.w_q"], grads, f"{p}.attn.w_q", bname(f"{p}.attn.b_q"))
        da = da + _linear_back(M._merge_heads(dk), a_in, params[f"{p}.attn.w_k"], grads, f"{p}.attn.w_k", bname(f"{p}.attn.b_k"))
        da = da + _linear_back(M._merge_heads(dv), a_in, params[f"{p}.attn.w_v"], grads, f"{p}.attn.w_v", bname(f"{p}.attn.b_v"))
        dx = dx + _norm_back(da, blk["n1"], params, f"{p}.attn_norm", c, grads)

    tokens = cache["tokens"]
    d_emb = np.zeros_like(params["embedding"])
    np.add.at(d_emb, tokens.reshape(-1), dx.reshape(-1, dx.shape[-1]))
    if c.tied_unembedding:
        d_emb = d_emb + d_wout
    else:
        grads["unembedding"] = d_wout
    grads["embedding"] = d_emb
    if c.pos_kind == "learned":
        d_pos = np.zeros_like(params["pos_embedding"])
        d_pos[: positions.size] = dx.sum(axis=0)
        grads["pos_embedding"] = d_pos
    return grads


def loss_and_grads(params, config, batch, rng=None):
    """Cross-entropy over every predicted position and its gradients.

    ``batch`` is (B, context_len + 1) token windows; position t predicts
    t + 1. Dropout (config.dropout_p) is active only when ``rng`` is given.
    """
    batch = np.asarray(batch)
    inputs, targets = batch[:, :-1], batch[:, 1:]
    train = rng is not None and config.dropout_p > 0.0
    logits, _, cache = M.run(params, config, inputs, train=train, rng=rng, keep_cache=True)
    loss, dlogits = cross_entropy(logits, targets)
    grads = backward(params, config, cache, dlogits)
    return loss, grads
