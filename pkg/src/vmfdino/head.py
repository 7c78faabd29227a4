"""DINO and DINO-vMF assignment heads.

Everything here is a pure function of arrays. Representations ``y`` may be
a single vector of length p or a batch of shape (B, p); logits follow the
same leading shape with K columns.

Prototype k is ``w_k = g_k v_k`` with unit direction ``v_k`` and magnitude
``g_k`` (stored as ``log g_k``). Under the mixture reading, the component
concentration at temperature tau is ``kappa_k = g_k / tau``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from vmfdino.errors import ContractError, DimensionError, DomainError
from vmfdino.vmf import grad_log_norm_const_approx, log_norm_const_approx, normalize

MODES = ("dino", "vmf")
VARIANTS = ("logit", "probability")
# the centering rule each mode uses in the original formulation
NATURAL_VARIANT = {"dino": "logit", "vmf": "probability"}


@dataclass(frozen=True)
class PrototypeBank:
    directions: np.ndarray
    log_magnitudes: np.ndarray
    l2_normalized: bool = False

    def __post_init__(self):
        v = np.asarray(self.directions, dtype=np.float64)
        lg = np.asarray(self.log_magnitudes, dtype=np.float64)
        if v.ndim != 2 or lg.shape != (v.shape[0],):
            raise DimensionError("directions must be (K, p) with one log-magnitude per row")
        if np.abs(np.linalg.norm(v, axis=1) - 1.0).max() > 1e-12:
            raise DomainError("prototype directions must be unit vectors")
        if self.l2_normalized and np.any(lg != 0.0):
            raise DomainError("an L2-normalized bank must have unit magnitudes")
        if not np.all(np.isfinite(lg)):
            raise DomainError("log-magnitudes must be finite")
        object.__setattr__(self, "directions", v)
        object.__setattr__(self, "log_magnitudes", lg)

    @classmethod
    def from_weights(cls, w, l2_normalized=False):
        w = np.asarray(w, dtype=np.float64)
        g = np.linalg.norm(w, axis=1)
        lg = np.zeros_like(g) if l2_normalized else np.log(g)
        return cls(normalize(w), lg, l2_normalized)

    @classmethod
    def random(cls, k, p, rng, l2_normalized=False, log_magnitude=0.0):
        v = normalize(rng.standard_normal((k, p)))
        lg = np.zeros(k) if l2_normalized else np.full(k, float(log_magnitude))
        return cls(v, lg, l2_normalized)

    @property
    def n_prototypes(self) -> int:
        return self.directions.shape[0]

    @property
    def dim(self) -> int:
        return self.directions.shape[1]

    @property
    def magnitudes(self) -> np.ndarray:
        return np.exp(self.log_magnitudes)

    @property
    def weights(self) -> np.ndarray:
        return self.magnitudes[:, None] * self.directions

    def kappas(self, tau: float) -> np.ndarray:
        return self.magnitudes / tau


@dataclass(frozen=True)
class CenterState:
    c: np.ndarray
    momentum: float
    variant: str = "logit"

    def __post_init__(self):
        c = np.asarray(self.c, dtype=np.float64)
        if c.ndim != 1 or not np.all(np.isfinite(c)):
            raise DomainError("center must be a finite vector")
        if not 0.0 < self.momentum < 1.0:
            raise DomainError(f"center momentum must lie in (0, 1), got {self.momentum!r}")
        if self.variant not in VARIANTS:
            raise DomainError(f"unknown center variant {self.variant!r}")
        object.__setattr__(self, "c", c)

    @classmethod
    def zeros(cls, k, momentum=0.9, variant="logit"):
        return cls(np.zeros(k), momentum, variant)


@dataclass(frozen=True)
class Temperatures:
    tau_s: float = 0.1
    tau_t: float = 0.04

    def __post_init__(self):
        if not (self.tau_s > 0 and self.tau_t > 0):
            raise DomainError("temperatures must be positive")
        if not self.tau_t < self.tau_s:
            raise DomainError(f"teacher must be sharper than student: tau_t={self.tau_t} >= tau_s={self.tau_s}")


# ---------------------------------------------------------------------------
# softmax helpers
# ---------------------------------------------------------------------------


def log_softmax(z, axis=-1):
    z = np.asarray(z, dtype=np.float64)
    zmax = np.max(z, axis=axis, keepdims=True)
    shifted = z - zmax
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def softmax(z, axis=-1):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - np.max(z, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# logits
# ---------------------------------------------------------------------------


def _check(y, bank, tau, mode):
    y = np.asarray(y, dtype=np.float64)
    if y.shape[-1] != bank.dim:
        raise DimensionError(f"representation has dimension {y.shape[-1]}, prototypes have {bank.dim}")
    if not tau > 0:
        raise DomainError(f"temperature must be positive, got {tau!r}")
    if mode not in MODES:
        raise DomainError(f"unknown head mode {mode!r}")
    return y


def inner_products(y, bank: PrototypeBank):
    """<w_k, y> for every prototype."""
    return np.asarray(y, dtype=np.float64) @ bank.weights.T


def log_normalizers(bank: PrototypeBank, tau: float) -> np.ndarray:
    """log C_p(g_k / tau) per prototype, using the approximate normalizer."""
    return log_norm_const_approx(bank.dim, bank.kappas(tau))


def _sharpened(y, bank, tau, mode):
    logits = inner_products(y, bank) / tau
    if mode == "vmf":
        logits = logits + log_normalizers(bank, tau)
    return logits


def student_logits(y, bank: PrototypeBank, tau_s: float, mode: str = "dino"):
    """Student logits <w_k, y>/tau_s, plus log C_p(g_k/tau_s) in vmf mode."""
    y = _check(y, bank, tau_s, mode)
    return _sharpened(y, bank, tau_s, mode)


def _center_offset(center, tau_t):
    # logit-space center is divided by the teacher temperature, the
    # probability-space one is already on the logit scale
    return center.c / tau_t if center.variant == "logit" else center.c


def teacher_logits(y, bank: PrototypeBank, center: CenterState, tau_t: float, mode: str = "dino", strict: bool = True):
    """Centered and sharpened teacher logits.

    dino/logit:        (<w_k, y> - c_k) / tau_t
    vmf/probability:   <w_k, y>/tau_t + log C_p(g_k/tau_t) - c_k

    With ``strict=False`` the two cross combinations are allowed as well
    (needed for the ablation grid): the normalizer term follows ``mode`` and
    the form of the center offset follows ``center.variant``.
    """
    y = _check(y, bank, tau_t, mode)
    if center.c.shape != (bank.n_prototypes,):
        raise DimensionError("center length must equal the number of prototypes")
    if strict and NATURAL_VARIANT[mode] != center.variant:
        raise ContractError(
            f"{mode} mode expects a {NATURAL_VARIANT[mode]!r} center, got {center.variant!r}; "
            "pass strict=False for cross-variant ablations"
        )
    return _sharpened(y, bank, tau_t, mode) - _center_offset(center, tau_t)


def center_statistics(y, bank: PrototypeBank, tau_t: float, mode: str, variant: str):
    """Per-sample rows consumed by ``update_center`` for the given variant.

    logit: the uncentered teacher logit times tau_t. In dino mode this is
    the raw inner product <w_k, y>; in vmf mode it also carries
    tau_t log C_p, so the center tracks the normalizer too.
    probability: the full uncentered teacher logits.
    """
    y = _check(y, bank, tau_t, mode)
    raw = _sharpened(y, bank, tau_t, mode)
    return raw * tau_t if variant == "logit" else raw


# ---------------------------------------------------------------------------
# loss, centering, priors
# ---------------------------------------------------------------------------


def cross_entropy(p_t, s_logits):
    """-sum_k p_t[k] log softmax(s_logits)[k]; batched over leading axes."""
    p_t = np.asarray(p_t, dtype=np.float64)
    s_logits = np.asarray(s_logits, dtype=np.float64)
    if p_t.shape != s_logits.shape:
        raise DimensionError(f"shape mismatch {p_t.shape} vs {s_logits.shape}")
    return -np.sum(p_t * log_softmax(s_logits), axis=-1)


def update_center(center: CenterState, batch_rows) -> CenterState:
    """One EMA step of the center from a (B, K) batch of teacher statistics.

    For the logit variant ``batch_rows`` are ``center_statistics(...,
    "logit")`` and are averaged directly. For the probability variant they
    are uncentered teacher logits; each row is softmaxed and the log of the
    batch-mean probability is the EMA target.
    """
    rows = np.atleast_2d(np.asarray(batch_rows, dtype=np.float64))
    if rows.shape[0] == 0:
        raise DomainError("cannot update the center from an empty batch")
    if rows.shape[1] != center.c.size:
        raise DimensionError("batch width must equal the center length")
    if center.variant == "logit":
        target = rows.mean(axis=0)
    else:
        # log (1/B) sum_b softmax(l_b)_k, via per-row log-softmax then logsumexp over the batch
        ls = log_softmax(rows, axis=1)
        top = ls.max(axis=0)
        target = top + np.log(np.exp(ls - top).sum(axis=0)) - np.log(rows.shape[0])
    m = center.momentum
    return replace(center, c=m * center.c + (1.0 - m) * target)


def estimate_prior(center: CenterState, tau_t: float) -> np.ndarray:
    """Cluster-prior estimate implied by the center: softmax(c/tau_t) or softmax(c)."""
    return softmax(_center_offset(center, tau_t))


def ema_update(teacher_params, student_params, lam: float):
    t = np.asarray(teacher_params, dtype=np.float64)
    s = np.asarray(student_params, dtype=np.float64)
    if t.shape != s.shape:
        raise DimensionError(f"parameter shapes differ: {t.shape} vs {s.shape}")
    if not 0.0 <= lam <= 1.0:
        raise DomainError(f"EMA coefficient must lie in [0, 1], got {lam!r}")
    return lam * t + (1.0 - lam) * s


# ---------------------------------------------------------------------------
# loss with analytic gradients
# ---------------------------------------------------------------------------


class LossGrads(NamedTuple):
    loss: float
    grad_z: np.ndarray
    grad_directions: np.ndarray
    grad_magnitudes: np.ndarray
    student_probs: np.ndarray
    teacher_probs: np.ndarray


def teacher_probs(y_t, bank, center, tau_t, mode, strict=True):
    return softmax(teacher_logits(y_t, bank, center, tau_t, mode, strict))


def loss_and_grads(
    z_s,
    y_t,
    student_bank: PrototypeBank,
    teacher_bank: PrototypeBank,
    center: CenterState,
    temps: Temperatures,
    mode: str = "dino",
    strict: bool = True,
    p_t=None,
) -> LossGrads:
    """Cross-entropy of student against a fixed teacher, with exact gradients.

    ``z_s`` is the student representation *before* L2-normalization (one
    vector or a batch); the loss is averaged over the batch. Gradients are
    returned for:

    * ``grad_z``: w.r.t. ``z_s`` (through the normalization),
    * ``grad_directions``: w.r.t. unnormalized direction parameters at the
      current unit directions, i.e. projected onto each tangent space,
    * ``grad_magnitudes``: w.r.t. ``g_k`` (not ``log g_k``); zero for an
      L2-normalized bank.

    The teacher side is a constant: pass ``p_t`` to reuse precomputed
    teacher probabilities.
    """
    z = np.asarray(z_s, dtype=np.float64)
    single = z.ndim == 1
    z = np.atleast_2d(z)
    if p_t is None:
        p_t = teacher_probs(y_t, teacher_bank, center, temps.tau_t, mode, strict)
    p_t = np.atleast_2d(p_t)
    b = z.shape[0]
    if p_t.shape != (b, student_bank.n_prototypes):
        raise DimensionError("teacher probabilities do not match the student batch")

    norms = np.linalg.norm(z, axis=1, keepdims=True)
    y = z / norms
    tau = temps.tau_s
    g = student_bank.magnitudes
    v = student_bank.directions
    dots = y @ v.T
    logits = dots * (g / tau)
    if mode == "vmf":
        logits = logits + log_normalizers(student_bank, tau)
    elif mode not in MODES:
        raise DomainError(f"unknown head mode {mode!r}")
    ls = log_softmax(logits)
    loss = float(-np.sum(p_t * ls) / b)

    # dL/dlogits = softmax - p_t, averaged over the batch
    d_logits = (np.exp(ls) - p_t) / b
    d_dots = d_logits * (g / tau)

    d_y = d_dots @ v
    d_z = (d_y - np.sum(d_y * y, axis=1, keepdims=True) * y) / norms

    d_v = d_dots.T @ y
    d_v -= np.sum(d_v * v, axis=1, keepdims=True) * v

    if student_bank.l2_normalized:
        d_g = np.zeros_like(g)
    else:
        d_kappa_logit = dots / tau
        if mode == "vmf":
            d_kappa_logit = d_kappa_logit + grad_log_norm_const_approx(student_bank.dim, g / tau) / tau
        d_g = np.sum(d_logits * d_kappa_logit, axis=0)

    return LossGrads(
        loss,
        d_z[0] if single else d_z,
        d_v,
        d_g,
        np.exp(ls)[0] if single else np.exp(ls),
        p_t[0] if single else p_t,
    )


# ---------------------------------------------------------------------------
# magnitude monotonicity
# ---------------------------------------------------------------------------


def vmf_logit_of_magnitude(cos_theta, g, p: int, tau: float):
    """l(g) = g cos(theta)/tau + log C_p(g/tau) for one prototype."""
    return np.asarray(g) * cos_theta / tau + log_norm_const_approx(p, np.asarray(g) / tau)


def vmf_logit_slope(cos_theta, g, p: int, tau: float):
    """dl/dg of ``vmf_logit_of_magnitude``."""
    return (cos_theta + grad_log_norm_const_approx(p, np.asarray(g) / tau)) / tau


def monotonicity_threshold(g, p: int, tau: float):
    """Cosine above which growing the magnitude raises the vMF logit.

    Equals -tau * d/dg log C_p(g/tau), which is -d log C_p/dkappa at
    kappa = g/tau (close to the mean resultant length A_p).
    """
    return -grad_log_norm_const_approx(p, np.asarray(g) / tau)
