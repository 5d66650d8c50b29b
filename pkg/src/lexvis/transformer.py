"""Encoder-decoder transformer in plain numpy with analytic gradients.

Every forward helper returns ``(output, cache)`` and has a matching backward
that consumes the cache, accumulates parameter gradients into a dict, and
returns the gradient for its inputs. Gradients are exact; the test suite
checks each parameter tensor against central finite differences.

Architecture: scaled embeddings plus sinusoidal positions, post-residual
layer normalization, multi-head scaled dot-product attention, and a two-layer
relu feed-forward block. Dropout noise is drawn from a counter-based
generator keyed by (seed, step, call site) so training runs are
bit-reproducible.

Parameter tensors live in a flat ``{name: array}`` dict. Checkpoint files
serialize them in the order given by :func:`param_names`:

    src_embed, tgt_embed,
    enc{i}.attn.{wq,wk,wv,wo,bq,bk,bv,bo}, enc{i}.ln1.{g,b},
    enc{i}.ff.{w1,b1,w2,b2}, enc{i}.ln2.{g,b},          for each encoder layer
    dec{i}.self.*, dec{i}.ln1.*, dec{i}.cross.*, dec{i}.ln2.*,
    dec{i}.ff.*, dec{i}.ln3.*,                          for each decoder layer
    out.w, out.b
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

Params = dict[str, np.ndarray]
Grads = dict[str, np.ndarray]

_LN_EPS = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    d_model: int
    n_layers_enc: int
    n_layers_dec: int
    n_heads: int
    d_ff: int
    vocab_src: int
    vocab_tgt: int
    dropout: float = 0.0
    max_len: int = 128

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")


def _attn_names(prefix: str) -> list[str]:
    return [f"{prefix}.{p}" for p in ("wq", "wk", "wv", "wo", "bq", "bk", "bv", "bo")]


def param_names(cfg: ModelConfig) -> list[str]:
    """Canonical tensor order used by init and by the checkpoint format."""
    names = ["src_embed", "tgt_embed"]
    for i in range(cfg.n_layers_enc):
        names += _attn_names(f"enc{i}.attn")
        names += [f"enc{i}.ln1.g", f"enc{i}.ln1.b"]
        names += [f"enc{i}.ff.w1", f"enc{i}.ff.b1", f"enc{i}.ff.w2", f"enc{i}.ff.b2"]
        names += [f"enc{i}.ln2.g", f"enc{i}.ln2.b"]
    for i in range(cfg.n_layers_dec):
        names += _attn_names(f"dec{i}.self")
        names += [f"dec{i}.ln1.g", f"dec{i}.ln1.b"]
        names += _attn_names(f"dec{i}.cross")
        names += [f"dec{i}.ln2.g", f"dec{i}.ln2.b"]
        names += [f"dec{i}.ff.w1", f"dec{i}.ff.b1", f"dec{i}.ff.w2", f"dec{i}.ff.b2"]
        names += [f"dec{i}.ln3.g", f"dec{i}.ln3.b"]
    names += ["out.w", "out.b"]
    return names


def param_shape(name: str, cfg: ModelConfig) -> tuple[int, ...]:
    d, f = cfg.d_model, cfg.d_ff
    if name == "src_embed":
        return (cfg.vocab_src, d)
    if name == "tgt_embed":
        return (cfg.vocab_tgt, d)
    if name == "out.w":
        return (d, cfg.vocab_tgt)
    if name == "out.b":
        return (cfg.vocab_tgt,)
    leaf = name.split(".", 1)[1]
    shapes = {
        "attn.wq": (d, d), "attn.wk": (d, d), "attn.wv": (d, d), "attn.wo": (d, d),
        "attn.bq": (d,), "attn.bk": (d,), "attn.bv": (d,), "attn.bo": (d,),
        "self.wq": (d, d), "self.wk": (d, d), "self.wv": (d, d), "self.wo": (d, d),
        "self.bq": (d,), "self.bk": (d,), "self.bv": (d,), "self.bo": (d,),
        "cross.wq": (d, d), "cross.wk": (d, d), "cross.wv": (d, d), "cross.wo": (d, d),
        "cross.bq": (d,), "cross.bk": (d,), "cross.bv": (d,), "cross.bo": (d,),
        "ff.w1": (d, f), "ff.b1": (f,), "ff.w2": (f, d), "ff.b2": (d,),
        "ln1.g": (d,), "ln1.b": (d,), "ln2.g": (d,), "ln2.b": (d,),
        "ln3.g": (d,), "ln3.b": (d,),
    }
    return shapes[leaf]


def init_params(cfg: ModelConfig, seed: int) -> Params:
    """Seeded init: weights uniform in +-1/sqrt(d_model), biases 0, LN gains 1."""
    rng = np.random.default_rng(seed)
    bound = 1.0 / math.sqrt(cfg.d_model)
    params: Params = {}
    for name in param_names(cfg):
        shape = param_shape(name, cfg)
        leaf = name.rsplit(".", 1)[-1]
        if name in ("src_embed", "tgt_embed") or leaf.startswith("w"):
            params[name] = rng.uniform(-bound, bound, size=shape)
        elif leaf == "g":
            params[name] = np.ones(shape)
        else:  # biases and LN shifts
            params[name] = np.zeros(shape)
    return params


@lru_cache(maxsize=8)
def positional_table(max_len: int, d_model: int) -> np.ndarray:
    """Sinusoidal position encodings, shape (max_len, d_model)."""
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    i = np.arange(0, d_model, 2, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, i / d_model)
    table = np.zeros((max_len, d_model))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles[:, : d_model // 2])
    return table


class DropoutPlan:
    """Deterministic dropout noise for one optimization step.

    Masks are generated by a Philox stream keyed on (seed, step, site) where
    ``site`` is the index of the dropout call within the forward pass. The
    same (seed, step) therefore reproduces identical noise bit for bit.
    """

    def __init__(self, seed: int, step: int, rate: float):
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.seed = seed
        self.step = step
        self.rate = rate
        self._site = 0

    def mask(self, shape: tuple[int, ...]) -> np.ndarray | None:
        site = self._site
        self._site += 1
        if self.rate == 0.0:
            return None
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.step, site))
        rng = np.random.Generator(np.random.Philox(ss))
        keep = rng.random(shape) >= self.rate
        return keep.astype(np.float64) / (1.0 - self.rate)


def _acc(grads: Grads, name: str, g: np.ndarray) -> None:
    if name in grads:
        grads[name] += g
    else:
        grads[name] = g


# ---------------------------------------------------------------------------
# elementary layers


def dropout_fwd(x, plan: DropoutPlan | None):
    if plan is None:
        return x, None
    m = plan.mask(x.shape)
    if m is None:
        return x, None
    return x * m, m


def dropout_bwd(dy, m):
    return dy if m is None else dy * m


def linear_fwd(x, params: Params, wname: str, bname: str):
    W = params[wname]
    y = x @ W + params[bname]
    return y, (x, W, wname, bname)


def linear_bwd(dy, cache, grads: Grads):
    x, W, wname, bname = cache
    xf = x.reshape(-1, x.shape[-1])
    dyf = dy.reshape(-1, dy.shape[-1])
    _acc(grads, wname, xf.T @ dyf)
    _acc(grads, bname, dyf.sum(axis=0))
    return dy @ W.T


def layer_norm_fwd(x, params: Params, gname: str, bname: str):
    g = params[gname]
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = xc * inv
    y = g * xhat + params[bname]
    return y, (xhat, inv, g, gname, bname)


def layer_norm_bwd(dy, cache, grads: Grads):
    xhat, inv, g, gname, bname = cache
    lead = tuple(range(dy.ndim - 1))
    _acc(grads, gname, (dy * xhat).sum(axis=lead))
    _acc(grads, bname, dy.sum(axis=lead))
    dxhat = dy * g
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    return inv * (dxhat - m1 - xhat * m2)


def masked_softmax(scores: np.ndarray, allowed: np.ndarray) -> np.ndarray:
    """Softmax over the last axis restricted to ``allowed`` entries.

    Disallowed entries get weight exactly 0; rows with nothing allowed come
    out all-zero instead of NaN.
    """
    neg = np.where(allowed, scores, -np.inf)
    mx = neg.max(axis=-1, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    e = np.exp(neg - mx)
    z = e.sum(axis=-1, keepdims=True)
    return e / np.where(z > 0.0, z, 1.0)


def softmax_bwd(dp, p):
    return p * (dp - (dp * p).sum(axis=-1, keepdims=True))


def _split_heads(x, n_heads: int):
    b, n, d = x.shape
    return x.reshape(b, n, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * dh)


def mha_fwd(xq, xkv, params: Params, prefix: str, n_heads: int, allowed, plan):
    """Multi-head attention; ``allowed`` is bool (b, nq, nk) or (b, 1, nk)."""
    q, cq = linear_fwd(xq, params, f"{prefix}.wq", f"{prefix}.bq")
    k, ck = linear_fwd(xkv, params, f"{prefix}.wk", f"{prefix}.bk")
    v, cv = linear_fwd(xkv, params, f"{prefix}.wv", f"{prefix}.bv")
    qh = _split_heads(q, n_heads)
    kh = _split_heads(k, n_heads)
    vh = _split_heads(v, n_heads)
    scale = 1.0 / math.sqrt(qh.shape[-1])
    s = (qh @ kh.transpose(0, 1, 3, 2)) * scale
    p = masked_softmax(s, allowed[:, None, :, :])
    o = p @ vh
    y, co = linear_fwd(_merge_heads(o), params, f"{prefix}.wo", f"{prefix}.bo")
    y, dm = dropout_fwd(y, plan)
    cache = {
        "cq": cq, "ck": ck, "cv": cv, "co": co,
        "qh": qh, "kh": kh, "vh": vh, "p": p,
        "scale": scale, "n_heads": n_heads, "dm": dm,
    }
    return y, cache


def mha_bwd(dy, cache, grads: Grads):
    dy = dropout_bwd(dy, cache["dm"])
    do = linear_bwd(dy, cache["co"], grads)
    do = _split_heads(do, cache["n_heads"])
    p, vh, qh, kh = cache["p"], cache["vh"], cache["qh"], cache["kh"]
    dp = do @ vh.transpose(0, 1, 3, 2)
    dvh = p.transpose(0, 1, 3, 2) @ do
    ds = softmax_bwd(dp, p) * cache["scale"]
    dqh = ds @ kh
    dkh = ds.transpose(0, 1, 3, 2) @ qh
    dxq = linear_bwd(_merge_heads(dqh), cache["cq"], grads)
    dxk = linear_bwd(_merge_heads(dkh), cache["ck"], grads)
    dxv = linear_bwd(_merge_heads(dvh), cache["cv"], grads)
    return dxq, dxk + dxv


def ff_fwd(x, params: Params, prefix: str, plan):
    h, c1 = linear_fwd(x, params, f"{prefix}.w1", f"{prefix}.b1")
    a = np.maximum(h, 0.0)
    y, c2 = linear_fwd(a, params, f"{prefix}.w2", f"{prefix}.b2")
    y, dm = dropout_fwd(y, plan)
    return y, (c1, c2, h, dm)


def ff_bwd(dy, cache, grads: Grads):
    c1, c2, h, dm = cache
    dy = dropout_bwd(dy, dm)
    da = linear_bwd(dy, c2, grads)
    return linear_bwd(da * (h > 0.0), c1, grads)


def embed_fwd(ids, params: Params, name: str, cfg: ModelConfig, positional: bool, plan):
    E = params[name]
    scale = math.sqrt(cfg.d_model)
    x = E[ids] * scale
    if positional:
        x = x + positional_table(cfg.max_len, cfg.d_model)[: ids.shape[1]]
    x, dm = dropout_fwd(x, plan)
    return x, (ids, name, scale, E.shape, dm)


def embed_bwd(dx, cache, grads: Grads):
    ids, name, scale, eshape, dm = cache
    dx = dropout_bwd(dx, dm)
    dE = np.zeros(eshape)
    np.add.at(dE, ids.reshape(-1), dx.reshape(-1, dx.shape[-1]) * scale)
    _acc(grads, name, dE)


# ---------------------------------------------------------------------------
# encoder / decoder stacks (batched: ids (b, n), activations (b, n, d))


def _check_ids(ids, vocab: int, max_len: int, what: str):
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"{what} id out of range [0, {vocab})")
    if ids.shape[1] > max_len:
        raise ValueError(f"{what} length {ids.shape[1]} exceeds max_len {max_len}")


def encode_batch(ids, params: Params, cfg: ModelConfig, *, src_mask=None,
                 plan: DropoutPlan | None = None, positional: bool = True):
    """Run the encoder stack; ids (b, n) int, src_mask (b, n) bool, True = real."""
    ids = np.asarray(ids)
    _check_ids(ids, cfg.vocab_src, cfg.max_len, "source")
    if src_mask is None:
        src_mask = np.ones(ids.shape, dtype=bool)
    x, ce = embed_fwd(ids, params, "src_embed", cfg, positional, plan)
    allowed = src_mask[:, None, :]
    layer_caches = []
    for i in range(cfg.n_layers_enc):
        pre = f"enc{i}"
        a, ca = mha_fwd(x, x, params, f"{pre}.attn", cfg.n_heads, allowed, plan)
        x, cl1 = layer_norm_fwd(x + a, params, f"{pre}.ln1.g", f"{pre}.ln1.b")
        f, cf = ff_fwd(x, params, f"{pre}.ff", plan)
        x, cl2 = layer_norm_fwd(x + f, params, f"{pre}.ln2.g", f"{pre}.ln2.b")
        layer_caches.append((ca, cl1, cf, cl2))
    return x, {"embed": ce, "layers": layer_caches}


def encode_batch_bwd(dh, cache, grads: Grads):
    for ca, cl1, cf, cl2 in reversed(cache["layers"]):
        d1 = layer_norm_bwd(dh, cl2, grads)
        dx1 = d1 + ff_bwd(d1, cf, grads)
        d0 = layer_norm_bwd(dx1, cl1, grads)
        dq, dkv = mha_bwd(d0, ca, grads)
        dh = d0 + dq + dkv
    embed_bwd(dh, cache["embed"], grads)


def decode_batch(tgt_ids, memory, params: Params, cfg: ModelConfig, *,
                 src_mask=None, tgt_mask=None, plan: DropoutPlan | None = None):
    """Run the decoder stack over ``memory``; returns logits (b, t, vocab_tgt)."""
    tgt_ids = np.asarray(tgt_ids)
    _check_ids(tgt_ids, cfg.vocab_tgt, cfg.max_len, "target")
    b, t = tgt_ids.shape
    if src_mask is None:
        src_mask = np.ones(memory.shape[:2], dtype=bool)
    if tgt_mask is None:
        tgt_mask = np.ones((b, t), dtype=bool)
    x, cd = embed_fwd(tgt_ids, params, "tgt_embed", cfg, True, plan)
    causal = np.tril(np.ones((t, t), dtype=bool))
    self_allowed = causal[None, :, :] & tgt_mask[:, None, :]
    cross_allowed = src_mask[:, None, :]
    layer_caches = []
    for i in range(cfg.n_layers_dec):
        pre = f"dec{i}"
        a, ca = mha_fwd(x, x, params, f"{pre}.self", cfg.n_heads, self_allowed, plan)
        x, cl1 = layer_norm_fwd(x + a, params, f"{pre}.ln1.g", f"{pre}.ln1.b")
        c, cc = mha_fwd(x, memory, params, f"{pre}.cross", cfg.n_heads, cross_allowed, plan)
        x, cl2 = layer_norm_fwd(x + c, params, f"{pre}.ln2.g", f"{pre}.ln2.b")
        f, cf = ff_fwd(x, params, f"{pre}.ff", plan)
        x, cl3 = layer_norm_fwd(x + f, params, f"{pre}.ln3.g", f"{pre}.ln3.b")
        layer_caches.append((ca, cl1, cc, cl2, cf, cl3))
    logits, cl = linear_fwd(x, params, "out.w", "out.b")
    return logits, {"embed": cd, "layers": layer_caches, "out": cl}


def decode_batch_bwd(dlogits, cache, grads: Grads):
    """Backward through the decoder; returns the gradient w.r.t. memory."""
    dx = linear_bwd(dlogits, cache["out"], grads)
    dmem = 0.0
    for ca, cl1, cc, cl2, cf, cl3 in reversed(cache["layers"]):
        d2 = layer_norm_bwd(dx, cl3, grads)
        dx2 = d2 + ff_bwd(d2, cf, grads)
        d1 = layer_norm_bwd(dx2, cl2, grads)
        dq, dm = mha_bwd(d1, cc, grads)
        dmem = dmem + dm
        dx1 = d1 + dq
        d0 = layer_norm_bwd(dx1, cl1, grads)
        dq2, dkv2 = mha_bwd(d0, ca, grads)
        dx = d0 + dq2 + dkv2
    embed_bwd(dx, cache["embed"], grads)
    return dmem


# ---------------------------------------------------------------------------
# single-sequence surface


def encode(token_ids, params: Params, cfg: ModelConfig, train_mode: bool = False,
           seed: int = 0, positional: bool = True) -> np.ndarray:
    """Encode one sequence of vocabulary ids into an (n, d_model) array."""
    ids = np.asarray(token_ids, dtype=np.int64)[None, :]
    plan = DropoutPlan(seed, 0, cfg.dropout) if train_mode else None
    h, _ = encode_batch(ids, params, cfg, plan=plan, positional=positional)
    return h[0]


def decode(target_ids, fused_memory, params: Params, cfg: ModelConfig,
           train_mode: bool = False, seed: int = 0) -> np.ndarray:
    """Causal decode over one memory; returns logits (t, vocab_tgt)."""
    ids = np.asarray(target_ids, dtype=np.int64)[None, :]
    mem = np.asarray(fused_memory)[None, :, :]
    if mem.shape[-1] != cfg.d_model:
        raise ValueError(f"memory width {mem.shape[-1]} != d_model {cfg.d_model}")
    plan = DropoutPlan(seed, 1, cfg.dropout) if train_mode else None
    logits, _ = decode_batch(ids, mem, params, cfg, plan=plan)
    return logits[0]
