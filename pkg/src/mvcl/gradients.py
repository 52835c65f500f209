"""Closed-form gradients of every loss term and a central-difference checker.

Gradients are taken in raw embedding coordinates. The cosine derivative used
throughout is the full one,

    d cos(a, b) / d a = b / (|a| |b|) - cos(a, b) * a / |a|^2,

which reduces to ``t_j / |v_i| - (v_i . t_j) v_i / |v_i|^3`` (times 1/tau)
whenever the text side is unit-norm, as it always is inside a ``Batch``.
"""

from dataclasses import dataclass

import numpy as np

from .errors import MvclError, NonFiniteError
from .linalg import EPS, as_matrix, cosine_matrix, log_softmax, row_norms
from .losses import LossConfig, _sigmoid, as_views, pair_array


@dataclass(frozen=True)
class GradientBundle:
    d_visual: np.ndarray
    d_textual: np.ndarray

    def __post_init__(self):
        if not (np.all(np.isfinite(self.d_visual)) and np.all(np.isfinite(self.d_textual))):
            raise NonFiniteError("gradient has non-finite entries")

    def __add__(self, other):
        return GradientBundle(self.d_visual + other.d_visual, self.d_textual + other.d_textual)

    def scale(self, w):
        return GradientBundle(w * self.d_visual, w * self.d_textual)


@dataclass(frozen=True)
class FdReport:
    max_rel_error: float
    worst_coordinate: tuple
    step: float
    max_abs_error: float = 0.0

    def format(self):
        return (
            f"max_rel_error={self.max_rel_error:.3e} "
            f"max_abs_error={self.max_abs_error:.3e} "
            f"worst_coordinate={tuple(int(i) for i in self.worst_coordinate)} step={self.step:g}"
        )


def _chain_cosine(ds, v, t):
    """Backpropagate ``dL/dcos`` (rows of v x rows of t) into v and t."""
    nv = row_norms(v)
    nt = row_norms(t)
    c = np.clip((v @ t.T) / np.outer(nv, nt), -1.0, 1.0)
    scaled = ds / np.outer(nv, nt)
    dc = ds * c
    dv = scaled @ t - (dc.sum(axis=1) / nv**2)[:, None] * v
    dt = scaled.T @ v - (dc.sum(axis=0) / nt**2)[:, None] * t
    return dv, dt


def _logit_grads(v, t, tau, i2t=1.0, t2i=1.0):
    s = cosine_matrix(v, t) / tau
    n = s.shape[0]
    eye = np.eye(n)
    g = np.zeros_like(s)
    if i2t:
        p = np.exp(log_softmax(s, axis=1))
        g += i2t * (p - eye) / n
    if t2i:
        q = np.exp(log_softmax(s.T, axis=1))
        g += t2i * (q.T - eye) / n
    return g / tau


def grad_image_to_text(b, cfg=LossConfig()):
    dv, dt = _chain_cosine(_logit_grads(b.visual, b.textual, cfg.tau, 1.0, 0.0), b.visual, b.textual)
    return GradientBundle(dv, dt)


def grad_text_to_image(b, cfg=LossConfig()):
    dv, dt = _chain_cosine(_logit_grads(b.visual, b.textual, cfg.tau, 0.0, 1.0), b.visual, b.textual)
    return GradientBundle(dv, dt)


def grad_contrastive(b, cfg=LossConfig()):
    g = _logit_grads(b.visual, b.textual, cfg.tau, 0.5, 0.5)
    dv, dt = _chain_cosine(g, b.visual, b.textual)
    return GradientBundle(dv, dt)


def _pair_grad(embs, pairs, coef_fn, cfg):
    e = as_matrix(embs, "embs")
    out = np.zeros_like(e)
    p = pair_array(pairs, e.shape[0])
    if p.shape[0] == 0:
        return out
    a, b = e[p[:, 0]], e[p[:, 1]]
    na, nb = row_norms(a), row_norms(b)
    c = np.clip(np.einsum("ij,ij->i", a, b) / (na * nb), -1.0, 1.0)
    sig = _sigmoid(c)
    coef = coef_fn(sig)
    # zero slope where the sigmoid clamp is active
    clamped = (sig < cfg.sigmoid_clamp) | (sig > 1 - cfg.sigmoid_clamp)
    coef = np.where(clamped, 0.0, coef)
    if cfg.pair_reduction == "mean":
        coef = coef / p.shape[0]
    ga = coef[:, None] * (b / (na * nb)[:, None] - (c / na**2)[:, None] * a)
    gb = coef[:, None] * (a / (na * nb)[:, None] - (c / nb**2)[:, None] * b)
    # np.add.at accumulates in pair order
    np.add.at(out, p[:, 0], ga)
    np.add.at(out, p[:, 1], gb)
    return out


def grad_positive_pairs(embs, pairs, cfg=LossConfig()):
    # d(-log sigmoid(s))/ds = sigmoid(s) - 1
    return _pair_grad(embs, pairs, lambda sig: sig - 1.0, cfg)


def grad_negative_pairs(embs, pairs, cfg=LossConfig()):
    # d(-log(1 - sigmoid(s)))/ds = sigmoid(s); the literal sign flips it
    sign = 1.0 if cfg.neg_sign == "corrected" else -1.0
    return _pair_grad(embs, pairs, lambda sig: sign * sig, cfg)


def grad_pair_losses(embs, pairsets, cfg=LossConfig()):
    return grad_positive_pairs(embs, pairsets.positives, cfg) + grad_negative_pairs(
        embs, pairsets.negatives, cfg
    )


def grad_consistency(views, texts):
    """Returns ``(d_views, d_texts)`` shaped like the inputs.

    The subgradient at a zero residual is taken to be zero.
    """
    v = as_views(views)
    t = as_matrix(texts, "texts")
    n = v.shape[0]
    r = (v - t[:, None, :]).mean(axis=1)
    norms = row_norms(r)
    unit = np.zeros_like(r)
    ok = norms > EPS
    unit[ok] = r[ok] / norms[ok, None]
    d_t = -unit / n
    d_v = np.repeat((unit / (3 * n))[:, None, :], 3, axis=1)
    return d_v, d_t


def numerical_grad(loss_fn, params, step=1e-4, batched=False, chunk=None):
    """Central differences of ``loss_fn`` over every coordinate of ``params``.

    With ``batched=True`` the loss takes a stack of shape ``(B, *params.shape)``
    and returns ``B`` values, so many probes share one vectorized call. It may
    also return ``(B, T)`` values for ``T`` losses at once; the result is then
    ``(T, *params.shape)``.
    """
    x = np.array(params, dtype=np.float64)
    flat = x.reshape(-1)
    n = flat.size
    if not batched:
        out = np.empty_like(flat)
        for i in range(n):
            orig = flat[i]
            flat[i] = orig + step
            fp = loss_fn(x)
            flat[i] = orig - step
            fm = loss_fn(x)
            flat[i] = orig
            out[i] = (fp - fm) / (2 * step)
        terms = None
    else:
        chunk = chunk or max(1, min(n, 2**21 // max(n, 1)))
        out = terms = None
        for lo in range(0, n, chunk):
            idx = np.arange(lo, min(n, lo + chunk))
            probes = np.repeat(flat[None, :], 2 * idx.size, axis=0)
            rows = np.arange(idx.size)
            probes[2 * rows, idx] += step
            probes[2 * rows + 1, idx] -= step
            vals = np.asarray(loss_fn(probes.reshape((-1,) + x.shape)), dtype=np.float64)
            if out is None:
                terms = vals.shape[1] if vals.ndim == 2 else None
                out = np.empty((n,) + vals.shape[1:])
            out[idx] = (vals[0::2] - vals[1::2]) / (2 * step)
    bad = np.flatnonzero(~np.isfinite(out).reshape(n, -1).all(axis=1))
    if bad.size:
        raise NonFiniteError(f"non-finite loss while probing coordinate {int(bad[0])}")
    if terms is None:
        return out.reshape(x.shape)
    return out.T.reshape((terms,) + x.shape)


def _compare(fd, analytic, step):
    analytic = np.asarray(analytic, dtype=np.float64)
    if fd.shape != analytic.shape:
        raise MvclError(f"analytic gradient shape {analytic.shape} != params shape {fd.shape}")
    diff = np.abs(analytic - fd)
    scale = max(float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(fd), initial=0.0)), 1e-10)
    rel = diff / scale
    worst = int(np.argmax(rel)) if rel.size else 0
    coord = np.unravel_index(worst, fd.shape) if rel.size else (0,)
    return FdReport(
        max_rel_error=float(rel.reshape(-1)[worst]) if rel.size else 0.0,
        worst_coordinate=tuple(int(i) for i in coord),
        step=step,
        max_abs_error=float(diff.max(initial=0.0)),
    )


def _check_step(step):
    if not 1e-6 <= step <= 1e-3:
        raise MvclError(f"step must lie in [1e-6, 1e-3], got {step}")


def finite_diff_check(loss_fn, params, analytic, step=1e-4, batched=False):
    """Compare ``analytic`` against central differences of ``loss_fn``.

    The relative error of each coordinate is measured against the largest
    gradient magnitude, ``max(|analytic|_inf, |fd|_inf, 1e-10)``, so that
    coordinates whose true value is near zero are judged on the scale of the
    whole gradient rather than on their own round-off.
    """
    _check_step(step)
    return _compare(numerical_grad(loss_fn, params, step, batched=batched), analytic, step)


def finite_diff_checks(loss_fn, params, analytics, step=1e-4):
    """``finite_diff_check`` for several losses sharing one batched evaluation.

    ``loss_fn`` maps a probe stack to ``(B, len(analytics))`` values.
    """
    _check_step(step)
    fd = numerical_grad(loss_fn, params, step, batched=True)
    if fd.shape[0] != len(analytics):
        raise MvclError(f"loss returned {fd.shape[0]} terms for {len(analytics)} analytic gradients")
    return [_compare(f, a, step) for f, a in zip(fd, analytics)]


@dataclass(frozen=True)
class TotalGradient:
    """Gradient of ``total_loss``: the contrastive batch rows plus the view/text inputs.

    Pair-loss gradients are folded into ``d_views`` because pair indices
    address the flattened views.
    """

    batch: GradientBundle
    d_views: np.ndarray
    d_texts: np.ndarray


def grad_total(b, views, texts, pairsets, cfg=LossConfig()):
    v = as_views(views)
    gb = grad_contrastive(b, cfg).scale(cfg.weight_contrastive)
    dv, dt = grad_consistency(v, texts)
    dv = cfg.weight_consistency * dv
    dt = cfg.weight_consistency * dt
    embs = v.reshape(-1, v.shape[2])
    dp = cfg.weight_pos * grad_positive_pairs(embs, pairsets.positives, cfg) + cfg.weight_neg * grad_negative_pairs(
        embs, pairsets.negatives, cfg
    )
    return TotalGradient(gb, dv + dp.reshape(v.shape), dt)
