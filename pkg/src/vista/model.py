"""Two-stage VISTA model with hand-written backpropagation.

Stage one summarises a user's history into ``k`` tokens: learned seed rows are
prepended to the history and the sequence passes through QLU + SGLU layers;
the seed positions of the last layer are the summary. A causal softmax decoder
over ``[tokens; history]`` provides the next-item reconstruction loss. Stage
two lets every candidate attend to ``[tokens; itself]`` with softmax attention
and feeds the result to an MLP head.

All parameters live in one flat ``{name: array}`` dict so the optimiser,
checkpointing and gradient checks can treat them uniformly.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.special import expit

from .attention import (
    SourceTargetSplit,
    qla_backward,
    qla_causal_backward,
    qla_causal_forward,
    qla_forward,
    softmax_attn_backward,
    softmax_attn_probs,
)
from .errors import CorruptSnapshot, NonFiniteLoss, ShapeMismatch
from .numerics import ActivationKind

ARCH_VISTA = "vista"
ARCH_SOFTMAX = "softmax"  # single-stage baseline: candidates attend to the raw history


@dataclass
class ModelConfig:
    arch: str = ARCH_VISTA
    d: int = 64
    k: int = 128
    summary_layers: int = 1
    target_layers: int = 1
    decoder_layers: int = 1
    phi1: str = ActivationKind.SHIFTED_ELU.value
    phi2: str = ActivationKind.IDENTITY.value
    attn_norm: str = "length"  # "length": divide QLA output by sequence length; "none"
    causal_summary: bool = False
    include_self: bool = True
    head_hidden: tuple = (64,)
    item_buckets: int = 1 << 14
    n_categories: int = 16
    recon_weight: float = 1.0
    recon_reduction: str = "mean"  # "mean" over the M-1 terms, or "sum"
    recon_stop_grad: bool = True
    emb_init: float = 0.1

    def __post_init__(self):
        self.head_hidden = tuple(int(h) for h in self.head_hidden)

    def validate(self):
        from .errors import ConfigError
        problems = []
        if self.arch not in (ARCH_VISTA, ARCH_SOFTMAX):
            problems.append(f"arch: unknown value {self.arch!r}")
        for name in ("d", "k", "item_buckets", "n_categories"):
            if getattr(self, name) < 1:
                problems.append(f"{name}: must be >= 1")
        for name in ("summary_layers", "target_layers", "decoder_layers"):
            if getattr(self, name) < 0:
                problems.append(f"{name}: must be >= 0")
        for name in ("phi1", "phi2"):
            try:
                ActivationKind(getattr(self, name))
            except ValueError:
                problems.append(f"{name}: unknown activation {getattr(self, name)!r}")
        if self.attn_norm not in ("length", "none"):
            problems.append("attn_norm: must be 'length' or 'none'")
        if self.recon_reduction not in ("mean", "sum"):
            problems.append("recon_reduction: must be 'mean' or 'sum'")
        if self.recon_weight < 0:
            problems.append("recon_weight: must be >= 0")
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    def to_dict(self):
        out = asdict(self)
        out["head_hidden"] = list(self.head_hidden)
        return out

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


# -- parameter initialisation ------------------------------------------------

def init_params(config: ModelConfig, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    d = config.d
    std = 1.0 / np.sqrt(d)
    p = {
        "emb.item": rng.normal(scale=config.emb_init, size=(config.item_buckets, d)),
        "emb.cat": rng.normal(scale=config.emb_init, size=(config.n_categories, d)),
    }
    if config.arch == ARCH_VISTA:
        p["seeds"] = rng.normal(scale=config.emb_init, size=(config.k, d))
        for l in range(config.summary_layers):
            for w in ("wq", "wk", "wv", "wg", "wo"):
                p[f"sum{l}.{w}"] = rng.normal(scale=std, size=(d, d))
        for l in range(config.decoder_layers):
            for w in ("wq", "wk", "wv", "wo"):
                p[f"dec{l}.{w}"] = rng.normal(scale=std, size=(d, d))
    for l in range(config.target_layers):
        for w in ("wq", "wk", "wv", "wo"):
            p[f"tgt{l}.{w}"] = rng.normal(scale=std, size=(d, d))
    p["head.wa"] = rng.normal(scale=std, size=(d, d))
    p["head.wb"] = rng.normal(scale=std, size=(d, d))
    width = 2 * d
    for i, h in enumerate(config.head_hidden):
        p[f"head.w{i}"] = rng.normal(scale=np.sqrt(2.0 / width), size=(width, h))
        p[f"head.b{i}"] = np.zeros(h)
        width = h
    p["head.w_out"] = rng.normal(scale=np.sqrt(1.0 / width), size=(width,))
    p["head.b_out"] = np.zeros(())
    return p


def _check_finite(name, *arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteLoss(name)


def _add(grads, name, value):
    if grads is None:
        return
    if name in grads:
        grads[name] += value
    else:
        grads[name] = np.array(value, dtype=np.float64, copy=True)


# -- embeddings ----------------------------------------------------------------

_HASH_MULT = np.uint64(0x9E3779B97F4A7C15)


def bucket_of(item_ids, buckets):
    """Deterministic multiplicative hash of item ids into ``buckets`` slots."""
    ids = np.asarray(item_ids, dtype=np.int64).astype(np.uint64)
    with np.errstate(over="ignore"):
        mixed = (ids + np.uint64(1)) * _HASH_MULT
    return ((mixed >> np.uint64(17)) % np.uint64(buckets)).astype(np.int64)


def embed(params, item_ids, cat_ids):
    buckets = params["emb.item"].shape[0]
    b = bucket_of(item_ids, buckets)
    c = np.asarray(cat_ids, dtype=np.int64) % params["emb.cat"].shape[0]
    return params["emb.item"][b] + params["emb.cat"][c], (b, c)


def embed_backward(cache, d_x, grads):
    if grads is None or d_x.size == 0:
        return
    b, c = cache
    np.add.at(grads["emb.item"], b, d_x)
    np.add.at(grads["emb.cat"], c, d_x)


# -- SGLU / QLU summarisation layer ---------------------------------------------

def sglu(x, o, w_g, w_o):
    """Gated output unit ``(o * sigmoid(x w_g)) w_o``."""
    x, o = np.asarray(x, dtype=np.float64), np.asarray(o, dtype=np.float64)
    if x.shape[0] != o.shape[0] or x.shape[1] != w_g.shape[0] or o.shape[1] != w_o.shape[0] \
            or w_g.shape[1] != o.shape[1]:
        raise ShapeMismatch(f"x {x.shape}, o {o.shape}, w_g {w_g.shape}, w_o {w_o.shape}")
    return (o * expit(x @ w_g)) @ w_o


def summary_layer_forward(params, prefix, x, config: ModelConfig):
    wq, wk, wv = params[prefix + "wq"], params[prefix + "wk"], params[prefix + "wv"]
    q, k, v = x @ wq, x @ wk, x @ wv
    phi1, phi2 = ActivationKind(config.phi1), ActivationKind(config.phi2)
    norm = float(x.shape[0]) if config.attn_norm == "length" and x.shape[0] else 1.0
    if config.causal_summary:
        o, saved = qla_causal_forward(q, k, v, phi1)
        split = None
    else:
        split = SourceTargetSplit.sources_only(q, k, v)
        o, _, saved = qla_forward(split, phi1, phi2)
    o = o / norm
    g = expit(x @ params[prefix + "wg"])
    gated = o * g
    out = x + gated @ params[prefix + "wo"]
    _check_finite(prefix.rstrip("."), out)
    return out, (x, q, k, v, split, saved, o, g, gated, norm)


def summary_layer_backward(params, prefix, cache, d_out, grads, config: ModelConfig):
    x, q, k, v, split, saved, o, g, gated, norm = cache
    _add(grads, prefix + "wo", gated.T @ d_out)
    d_gated = d_out @ params[prefix + "wo"].T
    d_o = d_gated * g
    d_pre = d_gated * o * g * (1.0 - g)
    _add(grads, prefix + "wg", x.T @ d_pre)
    d_x = d_out + d_pre @ params[prefix + "wg"].T
    d_o = d_o / norm
    if config.causal_summary:
        d_q, d_k, d_v = qla_causal_backward(saved, q, k, v, d_o)
    else:
        gq = qla_backward(saved, split, d_o, np.zeros((0, x.shape[1])))
        d_q, d_k, d_v = gq.d_qs, gq.d_ks, gq.d_vs
    for w, dw in (("wq", d_q), ("wk", d_k), ("wv", d_v)):
        _add(grads, prefix + w, x.T @ dw)
        d_x = d_x + dw @ params[prefix + w].T
    return d_x


def summarize(params, uih_x, config: ModelConfig):
    """Summary tokens ``(k, d)`` for one history ``(M, d)``.

    Full (non-causal) mode places the seeds first; causal mode places them
    after the history so that they can read all of it.
    """
    seeds = params["seeds"]
    uih_x = np.asarray(uih_x, dtype=np.float64).reshape(-1, seeds.shape[1])
    k = seeds.shape[0]
    x = np.vstack([uih_x, seeds]) if config.causal_summary else np.vstack([seeds, uih_x])
    caches = []
    for l in range(config.summary_layers):
        x, cache = summary_layer_forward(params, f"sum{l}.", x, config)
        caches.append(cache)
    tokens = x[-k:] if config.causal_summary else x[:k]
    return tokens, (caches, uih_x.shape[0])


def summarize_backward(params, cache, d_tokens, grads, config: ModelConfig):
    caches, m_len = cache
    k = params["seeds"].shape[0]
    d_x = np.zeros((k + m_len, params["seeds"].shape[1]))
    if config.causal_summary:
        d_x[m_len:] = d_tokens
    else:
        d_x[:k] = d_tokens
    for l in reversed(range(config.summary_layers)):
        d_x = summary_layer_backward(params, f"sum{l}.", caches[l], d_x, grads, config)
    if config.causal_summary:
        _add(grads, "seeds", d_x[m_len:])
        return d_x[:m_len]
    _add(grads, "seeds", d_x[:k])
    return d_x[k:]


# -- causal decoder and reconstruction loss -------------------------------------

def decoder_mask(k, m_len):
    """Prefix rows (summary tokens) are visible to all; history row i sees rows <= i."""
    total = k + m_len
    rows = np.arange(total)[:, None]
    cols = np.arange(total)[None, :]
    return (cols < k) | (cols <= rows)


def decoder_forward(params, prefix_x, uih_x, config: ModelConfig):
    k = prefix_x.shape[0]
    x = np.vstack([prefix_x, uih_x])
    mask = decoder_mask(k, uih_x.shape[0])
    scale = 1.0 / np.sqrt(x.shape[1])
    caches = []
    for l in range(config.decoder_layers):
        pre = f"dec{l}."
        q, kk, v = x @ params[pre + "wq"], x @ params[pre + "wk"], x @ params[pre + "wv"]
        p = softmax_attn_probs(q, kk, mask, scale)
        a = p @ v
        out = x + a @ params[pre + "wo"]
        _check_finite(f"dec{l}", out)
        caches.append((x, q, kk, v, p, a))
        x = out
    return x, (caches, k, scale)


def decoder_backward(params, cache, d_out, grads, config: ModelConfig):
    caches, k, scale = cache
    d_x = d_out
    for l in reversed(range(config.decoder_layers)):
        pre = f"dec{l}."
        x, q, kk, v, p, a = caches[l]
        _add(grads, pre + "wo", a.T @ d_x)
        d_a = d_x @ params[pre + "wo"].T
        d_q, d_k, d_v = softmax_attn_backward(q, kk, v, p, d_a, scale)
        d_in = d_x.copy()
        for w, dw in (("wq", d_q), ("wk", d_k), ("wv", d_v)):
            _add(grads, pre + w, x.T @ dw)
            d_in += dw @ params[pre + w].T
        d_x = d_in
    return d_x[:k], d_x[k:]


def reconstruction_loss(params, prefix_x, uih_x, config: ModelConfig, grads=None, weight=1.0):
    """Off-by-one squared error between decoder outputs and the next history item.

    ``v_i`` (decoder output at history position i) is compared with
    ``u_{i+1}``. With ``recon_reduction="sum"`` the loss is
    ``sum_i ||v_i - u_{i+1}||^2``; ``"mean"`` divides by ``M - 1``.
    Returns ``(loss, d_prefix, d_uih)``, the input gradients scaled by `weight`;
    parameter gradients (also scaled) are accumulated into `grads`.
    """
    uih_x = np.asarray(uih_x, dtype=np.float64)
    m_len = uih_x.shape[0]
    k = prefix_x.shape[0]
    if m_len < 2:
        return 0.0, np.zeros_like(prefix_x), np.zeros_like(uih_x)
    out, cache = decoder_forward(params, prefix_x, uih_x, config)
    v = out[k:k + m_len - 1]
    diff = v - uih_x[1:]
    denom = (m_len - 1) if config.recon_reduction == "mean" else 1
    loss = float(np.sum(diff * diff) / denom)
    if not np.isfinite(loss):
        raise NonFiniteLoss("reconstruction")
    d_out = np.zeros_like(out)
    d_out[k:k + m_len - 1] = (2.0 * weight / denom) * diff
    d_prefix, d_uih = decoder_backward(params, cache, d_out, grads, config)
    if not config.recon_stop_grad:
        d_uih = d_uih.copy()
        d_uih[1:] -= (2.0 * weight / denom) * diff
    return loss, d_prefix, d_uih


# -- target-aware attention ------------------------------------------------------

def target_attend(params, keys_x, cand_x, config: ModelConfig):
    """Each candidate attends to ``[keys_x; itself]`` independently.

    `keys_x` is the summary tokens for VISTA or the raw history for the
    single-stage baseline. Candidates never see one another: every candidate
    is processed on its own with fixed-shape operations.
    """
    keys_x = np.asarray(keys_x, dtype=np.float64)
    cand_x = np.asarray(cand_x, dtype=np.float64)
    d = cand_x.shape[1]
    scale = 1.0 / np.sqrt(d)
    h = cand_x.copy()
    layer_caches = []
    for l in range(config.target_layers):
        pre = f"tgt{l}."
        wq, wk, wv, wo = (params[pre + w] for w in ("wq", "wk", "wv", "wo"))
        kt, vt = keys_x @ wk, keys_x @ wv
        rows = []
        out = np.empty_like(h)
        for j in range(h.shape[0]):
            c = h[j]
            q = c @ wq
            if config.include_self:
                keys = np.vstack([kt, (c @ wk)[None, :]])
                vals = np.vstack([vt, (c @ wv)[None, :]])
            else:
                keys, vals = kt, vt
            s = (keys @ q) * scale
            s = s - s.max()
            p = np.exp(s)
            p /= p.sum()
            a = p @ vals
            out[j] = c + a @ wo
            rows.append((c, q, keys, vals, p, a))
        _check_finite(f"tgt{l}", out)
        layer_caches.append((kt, vt, rows))
        h = out
    return h, (keys_x, layer_caches, scale)


def target_attend_backward(params, cache, d_h, grads, config: ModelConfig):
    keys_x, layer_caches, scale = cache
    n_keys = keys_x.shape[0]
    d_keys_x = np.zeros_like(keys_x)
    d_h = np.array(d_h, dtype=np.float64, copy=True)
    for l in reversed(range(config.target_layers)):
        pre = f"tgt{l}."
        wq, wk, wv, wo = (params[pre + w] for w in ("wq", "wk", "wv", "wo"))
        kt, vt, rows = layer_caches[l]
        d_kt = np.zeros_like(kt)
        d_vt = np.zeros_like(vt)
        d_prev = np.empty_like(d_h)
        g_wq = np.zeros_like(wq)
        g_wk = np.zeros_like(wk)
        g_wv = np.zeros_like(wv)
        g_wo = np.zeros_like(wo)
        for j, (c, q, keys, vals, p, a) in enumerate(rows):
            dh = d_h[j]
            dc = dh.copy()
            g_wo += np.outer(a, dh)
            da = wo @ dh
            dp = vals @ da
            d_vals = np.outer(p, da)
            ds = p * (dp - p @ dp) * scale
            dq = keys.T @ ds
            d_keys = np.outer(ds, q)
            d_kt += d_keys[:n_keys]
            d_vt += d_vals[:n_keys]
            g_wq += np.outer(c, dq)
            dc += wq @ dq
            if config.include_self:
                g_wk += np.outer(c, d_keys[n_keys])
                g_wv += np.outer(c, d_vals[n_keys])
                dc += wk @ d_keys[n_keys] + wv @ d_vals[n_keys]
            d_prev[j] = dc
        g_wk += keys_x.T @ d_kt
        g_wv += keys_x.T @ d_vt
        d_keys_x += d_kt @ wk.T + d_vt @ wv.T
        for name, g in (("wq", g_wq), ("wk", g_wk), ("wv", g_wv), ("wo", g_wo)):
            _add(grads, pre + name, g)
        d_h = d_prev
    return d_keys_x, d_h


# -- prediction head -----------------------------------------------------------

def head_logits(params, h, config: ModelConfig):
    """MLP over ``[h, (h w_a) * (h w_b)]``, one candidate row at a time."""
    h = np.asarray(h, dtype=np.float64)
    logits = np.empty(h.shape[0])
    caches = []
    n_hidden = len(config.head_hidden)
    for j in range(h.shape[0]):
        x = h[j]
        ha, hb = x @ params["head.wa"], x @ params["head.wb"]
        z = np.concatenate([x, ha * hb])
        acts = [z]
        for i in range(n_hidden):
            z = np.maximum(z @ params[f"head.w{i}"] + params[f"head.b{i}"], 0.0)
            acts.append(z)
        logits[j] = z @ params["head.w_out"] + params["head.b_out"]
        caches.append((x, ha, hb, acts))
    return logits, caches


def head_backward(params, caches, d_logits, grads, config: ModelConfig):
    d = params["head.wa"].shape[0]
    n_hidden = len(config.head_hidden)
    d_h = np.empty((len(caches), d))
    g = {name: np.zeros_like(params[name]) for name in params if name.startswith("head.")}
    for j, (x, ha, hb, acts) in enumerate(caches):
        dl = d_logits[j]
        g["head.b_out"] += dl
        g["head.w_out"] += dl * acts[-1]
        dz = dl * params["head.w_out"]
        for i in reversed(range(n_hidden)):
            dz = dz * (acts[i + 1] > 0)
            g[f"head.w{i}"] += np.outer(acts[i], dz)
            g[f"head.b{i}"] += dz
            dz = params[f"head.w{i}"] @ dz
        dx = dz[:d].copy()
        d_prod = dz[d:]
        d_ha, d_hb = d_prod * hb, d_prod * ha
        g["head.wa"] += np.outer(x, d_ha)
        g["head.wb"] += np.outer(x, d_hb)
        dx += params["head.wa"] @ d_ha + params["head.wb"] @ d_hb
        d_h[j] = dx
    for name, value in g.items():
        _add(grads, name, value)
    return d_h


def predict(params, h, config: ModelConfig):
    """Click probabilities for target embeddings ``h`` (unclamped sigmoid)."""
    logits, _ = head_logits(params, h, config)
    return expit(logits)


def bce_from_logits(logits, labels):
    """Mean binary cross-entropy and its gradient w.r.t. the logits."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    loss = float(np.mean(np.logaddexp(0.0, z) - y * z))
    return loss, (expit(z) - y) / z.size


# -- full model ----------------------------------------------------------------

@dataclass
class LossParts:
    total: float = 0.0
    bce: float = 0.0
    recon: float = 0.0


class Adam:
    """Adam; a nonzero `weight_decay` applies decoupled (AdamW-style) shrinkage."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for name, g in grads.items():
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if self.weight_decay:
                params[name] *= 1.0 - self.lr * self.weight_decay
            params[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class VistaModel:
    config: ModelConfig
    params: dict = field(default_factory=dict)
    optimizer: Adam = field(default_factory=Adam)
    step: int = 0

    @classmethod
    def create(cls, config: ModelConfig, seed: int = 0, lr: float = 1e-3):
        config.validate()
        return cls(config, init_params(config, seed), Adam(lr=lr))

    # forward pieces -----------------------------------------------------------

    def embed_batch(self, batch):
        u, u_cache = embed(self.params, batch.uih_items, batch.uih_cats)
        c, c_cache = embed(self.params, batch.cand_items, batch.cand_cats)
        return u, u_cache, c, c_cache

    def summary_tokens(self, batch):
        """Stage-one output for one user, the thing that gets cached."""
        if self.config.arch != ARCH_VISTA:
            raise ValueError("the single-stage baseline has no summary tokens")
        u, _ = embed(self.params, batch.uih_items, batch.uih_cats)
        tokens, _ = summarize(self.params, u, self.config)
        return tokens

    def predict_from_tokens(self, tokens, cand_items, cand_cats):
        """Stage two only: score candidates against cached tokens."""
        c, _ = embed(self.params, cand_items, cand_cats)
        h, _ = target_attend(self.params, tokens, c, self.config)
        return predict(self.params, h, self.config)

    def predict_batch(self, batch):
        u, _, c, _ = self.embed_batch(batch)
        if self.config.arch == ARCH_VISTA:
            keys, _ = summarize(self.params, u, self.config)
        else:
            keys = u
        h, _ = target_attend(self.params, keys, c, self.config)
        return predict(self.params, h, self.config)

    # training -----------------------------------------------------------------

    def zero_grads(self):
        grads = {name: np.zeros_like(p) for name, p in self.params.items()}
        return grads

    def user_loss(self, batch, grads=None, recon_weight=None, scale=1.0):
        """Loss for one user; accumulates ``scale * dLoss/dparam`` into `grads`."""
        cfg = self.config
        lam = cfg.recon_weight if recon_weight is None else recon_weight
        u, u_cache, c, c_cache = self.embed_batch(batch)
        _check_finite("embedding", u, c)
        if cfg.arch == ARCH_VISTA:
            keys, s_cache = summarize(self.params, u, cfg)
        else:
            keys = u
        h, t_cache = target_attend(self.params, keys, c, cfg)
        logits, h_cache = head_logits(self.params, h, cfg)
        _check_finite("head", logits)
        bce, d_logits = bce_from_logits(logits, batch.labels)
        recon = 0.0
        d_keys_recon = d_u_recon = None
        run_recon = cfg.arch == ARCH_VISTA and cfg.decoder_layers > 0 and lam > 0
        if run_recon:
            recon, d_keys_recon, d_u_recon = reconstruction_loss(
                self.params, keys, u, cfg, grads=grads, weight=lam * scale)
        total = bce + lam * recon
        if not np.isfinite(total):
            raise NonFiniteLoss("loss")
        if grads is None:
            return LossParts(total, bce, recon)

        d_h = head_backward(self.params, h_cache, d_logits * scale, grads, cfg)
        d_keys, d_c = target_attend_backward(self.params, t_cache, d_h, grads, cfg)
        d_u = np.zeros_like(u)
        if run_recon:
            d_keys = d_keys + d_keys_recon
            d_u += d_u_recon
        if cfg.arch == ARCH_VISTA:
            d_u += summarize_backward(self.params, s_cache, d_keys, grads, cfg)
        else:
            d_u += d_keys
        embed_backward(u_cache, d_u, grads)
        embed_backward(c_cache, d_c, grads)
        return LossParts(total, bce, recon)

    def loss_and_grads(self, batches, recon_weight=None):
        grads = self.zero_grads()
        parts = LossParts()
        scale = 1.0 / len(batches)
        for b in batches:
            lp = self.user_loss(b, grads, recon_weight, scale)
            parts.total += lp.total * scale
            parts.bce += lp.bce * scale
            parts.recon += lp.recon * scale
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteLoss(name, "gradient")
        return parts, grads

    def train_step(self, batches, recon_weight=None):
        """One Adam update on a list of user batches; returns the pre-update losses."""
        if not isinstance(batches, (list, tuple)):
            batches = [batches]
        parts, grads = self.loss_and_grads(batches, recon_weight)
        self.optimizer.step(self.params, grads)
        self.step += 1
        return parts

    # persistence --------------------------------------------------------------

    def save(self, path):
        save_checkpoint(path, self.config, self.params, self.step)

    @classmethod
    def load(cls, path):
        config, params, step = load_checkpoint(path)
        return cls(config, params, Adam(), step)


# -- checkpoint container ----------------------------------------------------------

CHECKPOINT_MAGIC = b"VSTM"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, config: ModelConfig, params: dict, step: int = 0):
    """Write ``VSTM`` container: header, config JSON, named f64 tensors, CRC32."""
    meta = json.dumps({"config": config.to_dict(), "step": int(step)}, sort_keys=True).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(meta)), meta,
             struct.pack("<I", len(params))]
    for name in sorted(params):
        arr = np.asarray(params[name], dtype="<f8", order="C")
        raw = name.encode()
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def load_checkpoint(path):
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != CHECKPOINT_MAGIC:
        raise CorruptSnapshot(f"{path}: not a VSTM checkpoint")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptSnapshot(f"{path}: checksum mismatch")
    try:
        version, meta_len = struct.unpack_from("<II", body, 4)
        if version != CHECKPOINT_VERSION:
            raise CorruptSnapshot(f"{path}: unsupported version {version}")
        pos = 12
        meta = json.loads(body[pos:pos + meta_len])
        pos += meta_len
        (count,) = struct.unpack_from("<I", body, pos)
        pos += 4
        params = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", body, pos)
            pos += 4
            name = body[pos:pos + n].decode()
            pos += n
            (ndim,) = struct.unpack_from("<I", body, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}Q", body, pos)
            pos += 8 * ndim
            size = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(body, dtype="<f8", count=size, offset=pos).reshape(shape)
            params[name] = arr.astype(np.float64)
            pos += 8 * size
    except (struct.error, ValueError) as exc:
        raise CorruptSnapshot(f"{path}: {exc}") from exc
    return ModelConfig.from_dict(meta["config"]), params, meta["step"]
