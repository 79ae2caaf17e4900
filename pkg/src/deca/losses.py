"""Likelihood expectations, KL terms and the composite denoising objectives.

Two layers live here. The probability-level functions take arrays of model
outputs and return a :class:`LossBundle` whose ``grads`` hold derivatives of
``value`` with respect to each probability array; expectation values are sums
over the batch. The model-level objectives (``deca_loss``, ``deca_p_loss``,
``deca_p_multiclass_loss``) run the forward passes, average over the batch and
return gradients with respect to each model's flat parameter vector, keyed by
role.

Binary/multi-class correspondence: a binary probability ``f`` maps to the
simplex ``(1 - f, f)`` (class 1 is the positive class). Under that map the DP
step is the multi-class phase-1 objective with focus class 0 and the DN step
is focus class 1; in both cases the binary constant plays the role of C_{k1}.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import DecaConfig
from .errors import ContractError

EPS = 1e-7


@dataclass
class LossBundle:
    value: float
    grads: dict[str, np.ndarray] = field(default_factory=dict)


def _clamp(p, eps):
    p = np.asarray(p, dtype=float)
    return np.clip(p, eps, 1.0 - eps), (p >= eps) & (p <= 1.0 - eps)


def _labels(y, n):
    y = np.asarray(y)
    if y.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {y.shape}")
    return y


def _check_lengths(*arrays):
    n = len(arrays[0])
    if any(len(a) != n for a in arrays):
        raise ValueError("probability arrays must have equal length")
    return n


# -- KL terms -------------------------------------------------------------------

def kl_bernoulli(p, q, eps: float = EPS):
    """Elementwise KL(Bernoulli(p) || Bernoulli(q)) after clamping both to [eps, 1-eps]."""
    p, _ = _clamp(p, eps)
    q, _ = _clamp(q, eps)
    out = p * np.log(p / q) + (1 - p) * np.log((1 - p) / (1 - q))
    return float(out) if out.ndim == 0 else out


def kl_bernoulli_grads(p, q, eps: float = EPS):
    """(d/dp, d/dq) of :func:`kl_bernoulli`, zero where clamping is active."""
    pc, pm = _clamp(p, eps)
    qc, qm = _clamp(q, eps)
    dp = (np.log(pc / qc) - np.log((1 - pc) / (1 - qc))) * pm
    dq = (-pc / qc + (1 - pc) / (1 - qc)) * qm
    return dp, dq


def _clamp_simplex(p, eps):
    pc, mask = _clamp(p, eps)
    s = pc.sum(axis=-1, keepdims=True)
    y = pc / s

    def vjp(gy):
        return (gy - (gy * y).sum(axis=-1, keepdims=True)) / s * mask

    return y, vjp


def kl_categorical(p, q, eps: float = EPS):
    """Row-wise KL(p || q) between simplexes, each clamped to [eps, 1-eps] and renormalised."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ValueError(f"dimension mismatch: {p.shape} vs {q.shape}")
    ps, _ = _clamp_simplex(p, eps)
    qs, _ = _clamp_simplex(q, eps)
    out = (ps * np.log(ps / qs)).sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def kl_categorical_grads(p, q, eps: float = EPS):
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ValueError(f"dimension mismatch: {p.shape} vs {q.shape}")
    ps, p_vjp = _clamp_simplex(p, eps)
    qs, q_vjp = _clamp_simplex(q, eps)
    return p_vjp(np.log(ps / qs) + 1.0), q_vjp(-ps / qs)


# -- binary likelihood expectations ---------------------------------------------

def likelihood_expectation_binary(f, h, h_prime, observed, eps: float = EPS) -> LossBundle:
    """E_{Y~P_f}[log P(observed | Y)] with P(1|y=0) = h and P(1|y=1) = h'."""
    f = np.asarray(f, dtype=float)
    n = _check_lengths(f, h, h_prime)
    y = _labels(observed, n) == 1
    hc, hm = _clamp(h, eps)
    pc, pm = _clamp(h_prime, eps)
    lh, l1h, lp, l1p = np.log(hc), np.log1p(-hc), np.log(pc), np.log1p(-pc)
    val = np.where(y, lp * f + lh * (1 - f), l1p * f + l1h * (1 - f))
    df = np.where(y, lp - lh, l1p - l1h)
    dh = np.where(y, (1 - f) / hc, -(1 - f) / (1 - hc)) * hm
    dp = np.where(y, f / pc, -f / (1 - pc)) * pm
    return LossBundle(float(val.sum()), {"f": df, "h": dh, "h_prime": dp})


def dp_expectation(f, h, observed, c1: float, eps: float = EPS) -> LossBundle:
    """Denoising-positive step: h' pinned to 1, -log(1 - h') replaced by ``c1``."""
    f = np.asarray(f, dtype=float)
    n = _check_lengths(f, h)
    y = _labels(observed, n) == 1
    hc, hm = _clamp(h, eps)
    lh, l1h = np.log(hc), np.log1p(-hc)
    val = np.where(y, lh * (1 - f), -c1 * f + l1h * (1 - f))
    df = np.where(y, -lh, -c1 - l1h)
    dh = np.where(y, (1 - f) / hc, -(1 - f) / (1 - hc)) * hm
    return LossBundle(float(val.sum()), {"f": df, "h": dh})


def dn_expectation(f, h_prime, observed, c2: float, eps: float = EPS) -> LossBundle:
    """Denoising-negative step: h pinned to 0, -log h replaced by ``c2``."""
    f = np.asarray(f, dtype=float)
    n = _check_lengths(f, h_prime)
    y = _labels(observed, n) == 1
    pc, pm = _clamp(h_prime, eps)
    lp, l1p = np.log(pc), np.log1p(-pc)
    val = np.where(y, lp * f - c2 * (1 - f), l1p * f)
    df = np.where(y, lp + c2, l1p)
    dp = np.where(y, f / pc, -f / (1 - pc)) * pm
    return LossBundle(float(val.sum()), {"f": df, "h_prime": dp})


# -- multi-class likelihood expectations ----------------------------------------

def _check_focus(k, num_classes):
    if not 0 <= k < num_classes:
        raise ValueError(f"focus class {k} out of range for {num_classes} classes")


def multiclass_expectation_phase1(f, h_focus, observed, k: int, c1: float, c2: float,
                                  eps: float = EPS) -> LossBundle:
    """Phase-1 expectation with focus class ``k``.

    ``f`` is (N, C); ``h_focus`` is (N, C) with row n equal to
    P(observed = . | true = k, x_n). Channels for true classes other than ``k``
    are the identity, with ``c1`` standing in for -log P(observed = k | true != k)
    and ``c2`` for -log P(observed != k, observed != true | true != k).
    """
    f = np.asarray(f, dtype=float)
    h_focus = np.asarray(h_focus, dtype=float)
    if f.shape != h_focus.shape:
        raise ValueError(f"dimension mismatch: {f.shape} vs {h_focus.shape}")
    n, C = f.shape
    _check_focus(k, C)
    y = _labels(observed, n).astype(np.int64)
    rows = np.arange(n)
    fk, fy = f[:, k], f[rows, y]
    hy, hm = _clamp(h_focus[rows, y], eps)
    log_hy = np.log(hy)
    is_k = y == k
    val = np.where(is_k, -c1 * (1 - fk), -c2 * (1 - fk - fy)) + log_hy * fk

    df = np.zeros_like(f)
    df[:, k] = np.where(is_k, c1, c2) + log_hy
    df[rows[~is_k], y[~is_k]] += c2
    dh = np.zeros_like(h_focus)
    dh[rows, y] = fk / hy * hm
    return LossBundle(float(val.sum()), {"f": df, "h": dh})


def multiclass_expectation_phase2(f, h_all, observed, k: int, eps: float = EPS) -> LossBundle:
    """Phase-2 expectation: live channel values, gradient to ``h`` only through class ``k``.

    ``h_all`` is (N, C, C) indexed [example, assumed true class, observed class].
    For examples observed as some class other than ``k``, the identity term of
    that class is omitted, mirroring the phase-1 structure it replaces.
    """
    f = np.asarray(f, dtype=float)
    h_all = np.asarray(h_all, dtype=float)
    n, C = f.shape
    if h_all.shape != (n, C, C):
        raise ValueError(f"dimension mismatch: h has shape {h_all.shape}, want {(n, C, C)}")
    _check_focus(k, C)
    y = _labels(observed, n).astype(np.int64)
    rows = np.arange(n)
    h_obs, hm = _clamp(h_all[rows, :, y], eps)  # (N, C): P(observed y_n | true c)
    log_h = np.log(h_obs)
    w = np.ones((n, C))
    off = y != k
    w[rows[off], y[off]] = 0.0
    val = (w * log_h * f).sum(axis=1)
    df = w * log_h
    dh = np.zeros_like(h_all)
    dh[rows, k, y] = f[:, k] / h_obs[:, k] * hm[:, k]
    return LossBundle(float(val.sum()), {"f": df, "h": dh})


# -- model-level objectives -------------------------------------------------------

def _phase_expectation(f_probs, h, h_prime, x, y, cfg: DecaConfig, phase: str):
    """Run the DP or DN expectation; returns (bundle, h-role name, h probs)."""
    if phase == "DP":
        hv = h.forward(x)
        return dp_expectation(f_probs, hv, y, cfg.c1, cfg.eps), "h"
    if phase == "DN":
        hv = h_prime.forward(x)
        return dn_expectation(f_probs, hv, y, cfg.c2, cfg.eps), "h_prime"
    raise ValueError(f"unknown phase {phase!r}; expected 'DP' or 'DN'")


def deca_loss(f, g, h, h_prime, batch, cfg: DecaConfig, phase: str) -> LossBundle:
    """Batch-mean of -E + alpha KL(g||f) + (1 - alpha) KL(f||g); gradients for all four roles."""
    x, y = batch
    n = len(y)
    fp, gp = f.forward(x), g.forward(x)
    exp, role = _phase_expectation(fp, h, h_prime, x, y, cfg, phase)
    a = cfg.alpha
    kl_gf, kl_fg = kl_bernoulli(gp, fp, cfg.eps), kl_bernoulli(fp, gp, cfg.eps)
    d_g1, d_f1 = kl_bernoulli_grads(gp, fp, cfg.eps)
    d_f2, d_g2 = kl_bernoulli_grads(fp, gp, cfg.eps)
    value = (-exp.value + np.sum(a * kl_gf + (1 - a) * kl_fg)) / n
    up_f = (-exp.grads["f"] + a * d_f1 + (1 - a) * d_f2) / n
    up_g = (a * d_g1 + (1 - a) * d_g2) / n
    up_h = -exp.grads[role] / n
    grads = {"f": f.backward(x, up_f), "g": g.backward(x, up_g)}
    if role == "h":
        grads["h"], grads["h_prime"] = h.backward(x, up_h), np.zeros_like(h_prime.theta)
    else:
        grads["h"], grads["h_prime"] = np.zeros_like(h.theta), h_prime.backward(x, up_h)
    return LossBundle(float(value), grads)


def deca_p_loss(f, f_prior, h, h_prime, batch, cfg: DecaConfig, phase: str) -> LossBundle:
    """Batch-mean of -E + alpha KL(f||f') + (1 - alpha) KL(f'||f); the prior gets no gradient."""
    x, y = batch
    n = len(y)
    fp, pp = f.forward(x), f_prior.forward(x)
    exp, role = _phase_expectation(fp, h, h_prime, x, y, cfg, phase)
    a = cfg.alpha
    kl_fp, kl_pf = kl_bernoulli(fp, pp, cfg.eps), kl_bernoulli(pp, fp, cfg.eps)
    d_f1, _ = kl_bernoulli_grads(fp, pp, cfg.eps)
    _, d_f2 = kl_bernoulli_grads(pp, fp, cfg.eps)
    value = (-exp.value + np.sum(a * kl_fp + (1 - a) * kl_pf)) / n
    up_f = (-exp.grads["f"] + a * d_f1 + (1 - a) * d_f2) / n
    up_h = -exp.grads[role] / n
    grads = {"f": f.backward(x, up_f)}
    if role == "h":
        grads["h"], grads["h_prime"] = h.backward(x, up_h), np.zeros_like(h_prime.theta)
    else:
        grads["h"], grads["h_prime"] = np.zeros_like(h.theta), h_prime.backward(x, up_h)
    return LossBundle(float(value), grads)


def channel_table(h_multi, emb) -> np.ndarray:
    """(N, C, C) table of h over every assumed true class."""
    C = h_multi.spec.num_classes
    return np.stack([h_multi.forward((emb, c)) for c in range(C)], axis=1)


def deca_p_multiclass_loss(f, f_prior, h_multi, batch, cfg: DecaConfig, k: int,
                           phase: int = 1) -> LossBundle:
    """Batch-mean of -E (phase 1 or 2, focus ``k``) + KL(f || f').

    The channel model reads the target's penultimate embedding, treated as a
    constant input (no gradient flows back into ``f`` through it).
    """
    x, y = batch
    n = len(y)
    fp, pp = f.forward(x), f_prior.forward(x)
    emb = f.embed(x)
    if phase == 1:
        c1, c2 = cfg.constants_for(k)
        hk = h_multi.forward((emb, k))
        exp = multiclass_expectation_phase1(fp, hk, y, k, c1, c2, cfg.eps)
        up_h = -exp.grads["h"] / n
    elif phase == 2:
        exp = multiclass_expectation_phase2(fp, channel_table(h_multi, emb), y, k, cfg.eps)
        up_h = -exp.grads["h"][:, k, :] / n
    else:
        raise ValueError(f"unknown phase {phase!r}; expected 1 or 2")
    kl = kl_categorical(fp, pp, cfg.eps)
    d_f, _ = kl_categorical_grads(fp, pp, cfg.eps)
    value = (-exp.value + np.sum(kl)) / n
    up_f = (-exp.grads["f"] + d_f) / n
    return LossBundle(float(value), {"f": f.backward(x, up_f),
                                     "h": h_multi.backward((emb, k), up_h)})


# -- plain supervised losses ------------------------------------------------------

def bce_terms(p, y, eps: float = EPS):
    """Per-example binary cross-entropy and its derivative w.r.t. ``p``."""
    pc, m = _clamp(p, eps)
    y = np.asarray(y, dtype=float)
    loss = -(y * np.log(pc) + (1 - y) * np.log1p(-pc))
    grad = (-(y / pc) + (1 - y) / (1 - pc)) * m
    return loss, grad


def ce_terms(p, y, eps: float = EPS):
    """Per-example categorical cross-entropy and its derivative w.r.t. ``p``."""
    p = np.asarray(p, dtype=float)
    rows = np.arange(len(p))
    py, m = _clamp(p[rows, y], eps)
    grad = np.zeros_like(p)
    grad[rows, y] = -m.astype(float) / py
    return -np.log(py), grad


def supervised_terms(model, x, y, eps: float = EPS):
    """Per-example loss and probability-space upstream for the model's output type."""
    p = model.forward(x)
    return (bce_terms if model.binary else ce_terms)(p, y, eps)


def supervised_loss(model, batch, weights=None, eps: float = EPS) -> LossBundle:
    """Weighted mean cross-entropy; ``weights`` of zero drop examples from the gradient."""
    x, y = batch
    loss, grad = supervised_terms(model, x, y, eps)
    w = np.ones(len(y)) if weights is None else np.asarray(weights, dtype=float)
    n = len(y)
    up = grad * (w if grad.ndim == 1 else w[:, None]) / n
    return LossBundle(float((w * loss).sum() / n), {"f": model.backward(x, up)})


# -- interpretation ---------------------------------------------------------------

def real_positive_probability_values(f, h=None, h_prime=None):
    """P(true = 1 | observed = 1): ``f`` alone (prior mode) or Bayes through the channel."""
    f = np.asarray(f, dtype=float)
    if h is None and h_prime is None:
        return f
    if h is None or h_prime is None:
        raise ValueError("both channel probabilities are needed in co-trained mode")
    ratio = np.asarray(h, dtype=float) / np.asarray(h_prime, dtype=float)
    return f / (f + ratio * (1 - f))


def real_positive_probability(f, pairs, dataset, h=None, h_prime=None) -> np.ndarray:
    """Model-level interpretation on interacted pairs of ``dataset``."""
    pairs = np.atleast_2d(np.asarray(pairs, dtype=np.int64))
    if not dataset.contains(pairs).all():
        raise ContractError("real-positive probability is defined only on interacted pairs")
    fv = f.forward(pairs)
    if h is None:
        return fv
    return real_positive_probability_values(fv, h.forward(pairs), h_prime.forward(pairs))
