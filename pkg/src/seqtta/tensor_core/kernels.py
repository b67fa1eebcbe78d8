"""Forward/backward kernels for the two fixed encoder architectures.

Every ``*_forward`` returns ``(output, cache)``; the matching ``*_backward``
takes the upstream gradient and the cache and returns the input gradient
plus a dict of parameter gradients. Arrays are float64 and batched over a
leading axis where it makes sense: sequences are ``(B, L, d)``.
"""

import os

import numpy as np

_DEBUG = os.environ.get("SEQTTA_DEBUG", "") not in ("", "0")


def set_debug(flag):
    """Toggle the post-kernel finiteness assertion."""
    global _DEBUG
    _DEBUG = bool(flag)


def _check(name, *arrays):
    if _DEBUG:
        for a in arrays:
            if not np.all(np.isfinite(a)):
                raise FloatingPointError(f"non-finite values after {name}")


# -- embedding ---------------------------------------------------------------

def embedding_forward(table, ids):
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(
            f"item id out of range [0, {table.shape[0] - 1}]: "
            f"min={ids.min()}, max={ids.max()}")
    out = table[ids]
    _check("embedding", out)
    return out, ids


def embedding_backward(dout, ids, table_shape, padding_idx=0):
    """Scatter-add ``dout`` rows into a zero gradient of ``table_shape``."""
    grad = np.zeros(table_shape)
    np.add.at(grad, ids.reshape(-1), dout.reshape(-1, table_shape[1]))
    if padding_idx is not None:
        grad[padding_idx] = 0.0
    return grad


# -- linear ------------------------------------------------------------------

def linear_forward(x, W, b):
    out = x @ W + b
    _check("linear", out)
    return out, x


def linear_backward(dout, x, W):
    dx = dout @ W.T
    x2 = x.reshape(-1, x.shape[-1])
    d2 = dout.reshape(-1, dout.shape[-1])
    return dx, {"W": x2.T @ d2, "b": d2.sum(axis=0)}


# -- layer norm --------------------------------------------------------------

def layer_norm_forward(x, gamma, beta, eps=1e-8):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma + beta
    _check("layer_norm", out)
    return out, (xhat, inv, gamma)


def layer_norm_backward(dout, cache):
    xhat, inv, gamma = cache
    d = xhat.shape[-1]
    dxhat = dout * gamma
    dx = inv / d * (d * dxhat
                    - dxhat.sum(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
    flat = dout.reshape(-1, d)
    return dx, {"gamma": (flat * xhat.reshape(-1, d)).sum(axis=0),
                "beta": flat.sum(axis=0)}


# -- pointwise feed-forward --------------------------------------------------

def ffn_forward(x, W1, b1, W2, b2):
    pre, _ = linear_forward(x, W1, b1)
    act = np.maximum(pre, 0.0)
    out, _ = linear_forward(act, W2, b2)
    return out, (x, pre, act, W1, W2)


def ffn_backward(dout, cache):
    x, pre, act, W1, W2 = cache
    dact, g2 = linear_backward(dout, act, W2)
    dpre = dact * (pre > 0)
    dx, g1 = linear_backward(dpre, x, W1)
    return dx, {"W1": g1["W"], "b1": g1["b"], "W2": g2["W"], "b2": g2["b"]}


# -- causal self-attention ---------------------------------------------------

def attention_mask(key_valid):
    """Boolean ``(B, L, L)`` mask of allowed query->key pairs.

    Keys must be at or before the query and not padding. A query may always
    attend to itself, so no row is ever empty.
    """
    B, L = key_valid.shape
    causal = np.tril(np.ones((L, L), dtype=bool))
    allowed = causal[None] & key_valid[:, None, :]
    allowed |= np.eye(L, dtype=bool)[None]
    return allowed


def attention_forward(x, p, allowed, n_heads=1):
    """Multi-head scaled dot-product self-attention with output projection.

    ``p`` holds Wq, bq, Wk, bk, Wv, bv, Wo, bo.
    """
    B, L, d = x.shape
    if d % n_heads:
        raise ValueError(f"d={d} not divisible by n_heads={n_heads}")
    dh = d // n_heads

    def split(t):
        return t.reshape(B, L, n_heads, dh).transpose(0, 2, 1, 3)

    q = split(x @ p["Wq"] + p["bq"])
    k = split(x @ p["Wk"] + p["bk"])
    v = split(x @ p["Wv"] + p["bv"])
    scale = 1.0 / np.sqrt(dh)
    logits = (q @ k.transpose(0, 1, 3, 2)) * scale
    logits = np.where(allowed[:, None], logits, -np.inf)
    logits = logits - logits.max(axis=-1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=-1, keepdims=True)
    ctx = (w @ v).transpose(0, 2, 1, 3).reshape(B, L, d)
    out = ctx @ p["Wo"] + p["bo"]
    _check("attention", out)
    return out, (x, q, k, v, w, ctx, scale, n_heads)


def attention_backward(dout, cache, p):
    x, q, k, v, w, ctx, scale, n_heads = cache
    B, L, d = x.shape
    dh = d // n_heads

    def split(t):
        return t.reshape(B, L, n_heads, dh).transpose(0, 2, 1, 3)

    def merge(t):
        return t.transpose(0, 2, 1, 3).reshape(B, L, d)

    grads = {}
    dctx, go = linear_backward(dout, ctx, p["Wo"])
    grads["Wo"], grads["bo"] = go["W"], go["b"]
    dctx = split(dctx)
    dw = dctx @ v.transpose(0, 1, 3, 2)
    dv = w.transpose(0, 1, 3, 2) @ dctx
    dlogits = w * (dw - (dw * w).sum(axis=-1, keepdims=True)) * scale
    dq = dlogits @ k
    dk = dlogits.transpose(0, 1, 3, 2) @ q
    dx = np.zeros_like(x)
    for name, dproj in (("q", dq), ("k", dk), ("v", dv)):
        W = p["W" + name]
        dxi, g = linear_backward(merge(dproj), x, W)
        dx += dxi
        grads["W" + name], grads["b" + name] = g["W"], g["b"]
    return dx, grads


# -- transformer block (post-LN) ---------------------------------------------

def block_forward(x, p, allowed, n_heads=1):
    """attention -> residual + LN -> FFN -> residual + LN."""
    a, c_att = attention_forward(x, p, allowed, n_heads)
    h1, c_ln1 = layer_norm_forward(x + a, p["ln1_g"], p["ln1_b"])
    f, c_ffn = ffn_forward(h1, p["W1"], p["b1"], p["W2"], p["b2"])
    out, c_ln2 = layer_norm_forward(h1 + f, p["ln2_g"], p["ln2_b"])
    return out, (c_att, c_ln1, c_ffn, c_ln2)


def block_backward(dout, cache, p):
    c_att, c_ln1, c_ffn, c_ln2 = cache
    grads = {}
    ds2, g = layer_norm_backward(dout, c_ln2)
    grads["ln2_g"], grads["ln2_b"] = g["gamma"], g["beta"]
    dh1, g = ffn_backward(ds2, c_ffn)
    grads.update(g)
    dh1 = dh1 + ds2
    ds1, g = layer_norm_backward(dh1, c_ln1)
    grads["ln1_g"], grads["ln1_b"] = g["gamma"], g["beta"]
    dx, g = attention_backward(ds1, c_att, p)
    grads.update(g)
    return dx + ds1, grads


# -- GRU ---------------------------------------------------------------------

def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def gru_forward(x, p, valid=None):
    """Left-to-right GRU over ``x`` of shape ``(B, L, d_in)`` from a zero state.

    ``p`` holds Wx (d_in, 3h), Wh (h, 3h), bx, bh; gate order is reset,
    update, candidate. Where ``valid`` is False the state is carried
    through unchanged, so left padding leaves the state at zero.
    """
    B, L, _ = x.shape
    hdim = p["Wh"].shape[0]
    if valid is None:
        valid = np.ones((B, L), dtype=bool)
    gx = x @ p["Wx"] + p["bx"]
    H = np.zeros((B, L, hdim))
    h = np.zeros((B, hdim))
    steps = []
    for t in range(L):
        gh = h @ p["Wh"] + p["bh"]
        r = _sigmoid(gx[:, t, :hdim] + gh[:, :hdim])
        z = _sigmoid(gx[:, t, hdim:2 * hdim] + gh[:, hdim:2 * hdim])
        n = np.tanh(gx[:, t, 2 * hdim:] + r * gh[:, 2 * hdim:])
        h_new = (1.0 - z) * n + z * h
        m = valid[:, t:t + 1]
        steps.append((h, r, z, n, gh[:, 2 * hdim:], m))
        h = np.where(m, h_new, h)
        H[:, t] = h
    _check("gru", H)
    return H, (x, steps)


def gru_backward(dH, cache, p):
    x, steps = cache
    B, L, _ = x.shape
    hdim = p["Wh"].shape[0]
    dgx = np.zeros((B, L, 3 * hdim))
    dWh = np.zeros_like(p["Wh"])
    dbh = np.zeros_like(p["bh"])
    carry = np.zeros((B, hdim))
    for t in range(L - 1, -1, -1):
        h_prev, r, z, n, ghn, m = steps[t]
        dh = dH[:, t] + carry
        dh_new = np.where(m, dh, 0.0)
        dprev = np.where(m, 0.0, dh)
        dn = dh_new * (1.0 - z)
        dz = dh_new * (h_prev - n)
        dprev = dprev + dh_new * z
        dn_pre = dn * (1.0 - n * n)
        dr = dn_pre * ghn
        dr_pre = dr * r * (1.0 - r)
        dz_pre = dz * z * (1.0 - z)
        dgx[:, t, :hdim] = dr_pre
        dgx[:, t, hdim:2 * hdim] = dz_pre
        dgx[:, t, 2 * hdim:] = dn_pre
        dgh = np.concatenate([dr_pre, dz_pre, dn_pre * r], axis=1)
        dWh += h_prev.T @ dgh
        dbh += dgh.sum(axis=0)
        carry = dprev + dgh @ p["Wh"].T
    dx, g = linear_backward(dgx, x, p["Wx"])
    return dx, {"Wx": g["W"], "bx": g["b"], "Wh": dWh, "bh": dbh}


# -- full-vocabulary softmax cross-entropy -----------------------------------

def log_softmax(scores):
    shifted = scores - scores.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(scores):
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(scores, targets, mask=None):
    """Mean negative log-likelihood over unmasked rows.

    ``scores`` is ``(N, V)`` with column ``j`` holding item id ``j + 1``;
    ``targets`` are item ids in ``[1, V]``. Returns ``(loss, dscores)``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets)
    N, V = scores.shape
    if mask is None:
        mask = np.ones(N, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise ValueError("softmax_cross_entropy: no unmasked positions")
    rows = np.flatnonzero(mask)
    cols = targets[rows] - 1
    if cols.size and (cols.min() < 0 or cols.max() >= V):
        raise IndexError("target item id out of range")
    logp = log_softmax(scores[rows])
    loss = -logp[np.arange(rows.size), cols].sum() / count
    dscores = np.zeros_like(scores)
    g = np.exp(logp)
    g[np.arange(rows.size), cols] -= 1.0
    dscores[rows] = g / count
    _check("softmax_cross_entropy", dscores)
    return loss, dscores
