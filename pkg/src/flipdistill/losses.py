"""Training objectives: similarity matrices, the dual-threshold noise
filter, filtered distillation MSE, the margin-aware angular contrastive
loss, supervised BCE, and their weighted total.

Teacher-side quantities (alpha_s, theta_s, phi, y) are plain ndarrays:
no gradient flows into the frozen teacher. Student-side quantities are
Tensors on the tape.
"""

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

log = logging.getLogger(__name__)

EPS_NORM = 1e-12   # pads cosine denominators against zero-norm rows
EPS_PROB = 1e-12   # clamp for probabilities before log


class ConfigError(ValueError):
    pass


class TrainingStepError(RuntimeError):
    pass


@dataclass
class BatchMatrices:
    """All pairwise quantities for one batch of B aligned pairs."""
    alpha_s: np.ndarray   # teacher cosine, B x B, constant
    alpha_l: Tensor       # student cosine, B x B, on the tape
    y: np.ndarray         # pair labels, B x B, {0,1}
    phi: np.ndarray       # filter mask, B x B, {0,1}


@dataclass
class LossBreakdown:
    l_sup: float
    l_dist: float
    l_mcl: float
    total: float
    filtered_count: int


def cosine_matrix(r_a, r_b):
    """Pairwise cosine similarities between the rows of two B x r matrices.

    Works on Tensors (differentiable) and plain arrays alike.
    """
    r_a = r_a if isinstance(r_a, Tensor) else Tensor(r_a)
    r_b = r_b if isinstance(r_b, Tensor) else Tensor(r_b)
    dots = T.matmul(r_a, r_b.T)
    na = T.sqrt(T.reduce_sum(r_a * r_a, axis=1, keepdims=True))
    nb = T.sqrt(T.reduce_sum(r_b * r_b, axis=1, keepdims=True))
    denom = T.matmul(na, nb.T) + EPS_NORM
    return dots / denom


def filter_mask(alpha_s, y, theta=0.5):
    """Dual-threshold noise filter.

    An entry is dropped (0) when a labeled-positive pair has teacher
    similarity below theta, or a labeled-negative pair has teacher
    similarity at or above 1 - theta.
    """
    if not 0.0 < theta < 1.0:
        raise ConfigError(f"filter threshold must be in (0, 1), got {theta}")
    alpha_s = np.asarray(alpha_s, dtype=np.float64)
    y = np.asarray(y)
    noisy_pos = (alpha_s < theta) & (y == 1)
    noisy_neg = (alpha_s >= 1.0 - theta) & (y == 0)
    return np.where(noisy_pos | noisy_neg, 0.0, 1.0)


def distillation_loss(m: BatchMatrices) -> Tensor:
    """Mean squared teacher/student cosine gap over unfiltered entries.

    Normalized by the count of surviving entries so filtered pairs
    neither contribute error nor dilute it; returns 0 when everything
    is filtered.
    """
    n = int(m.phi.sum())
    if n == 0:
        return Tensor(0.0)
    diff = Tensor(m.alpha_s) - m.alpha_l
    return T.reduce_sum(Tensor(m.phi) * diff * diff) * (1.0 / n)


def angular(alpha):
    """Angular distance: arccos of (clamped) cosine similarity."""
    if isinstance(alpha, Tensor):
        return T.arccos(alpha)
    clamped = np.clip(alpha, -1.0 + T.ARCCOS_CLAMP_EPS, 1.0 - T.ARCCOS_CLAMP_EPS)
    return np.arccos(clamped)


def mcl_loss(theta_l, theta_s, phi, y, m_c=0.06, margin_from_pair=True):
    """Margin-aware contrastive loss in angular space.

    Per anchor i whose aligned pair (the diagonal) is labeled positive
    and unfiltered:

        -log[ e^{cos(tl_ii + m_c*ts_ii)} /
              (e^{cos(tl_ii + m_c*ts_ii)}
               + sum_{j'} phi_ij' e^{cos(tl_ij' - m_c*ts_ii)}) ]

    where j' ranges over the anchor's unpaired (y=0) columns. The margin
    inside the negative terms uses the positive pair's teacher angle
    ts_ii; set margin_from_pair=False to use each negative's own ts_ij'
    instead (non-default variant).

    Returns the mean over surviving anchors; 0 (with a warning) when no
    anchor survives.
    """
    if m_c < 0:
        raise ConfigError(f"margin scale must be >= 0, got {m_c}")
    theta_s = np.asarray(theta_s, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    y = np.asarray(y)
    b = theta_s.shape[0]
    diag = np.arange(b)

    anchors = diag[(y[diag, diag] == 1) & (phi[diag, diag] == 1)]
    if anchors.size == 0:
        log.warning("mcl_loss: no surviving anchors in batch, returning 0")
        return Tensor(0.0)

    ts_pair = theta_s[diag, diag]  # per-row teacher angle of the aligned pair
    if margin_from_pair:
        neg_shift = m_c * ts_pair[:, None] * np.ones((b, b))
    else:
        neg_shift = m_c * theta_s

    neg_mask = phi * (y == 0)
    np.fill_diagonal(neg_mask, 0.0)

    tl_diag = theta_l[diag, diag]
    pos_exp = T.exp(T.cos(tl_diag + Tensor(m_c * ts_pair)))
    neg_exp = T.exp(T.cos(theta_l - Tensor(neg_shift))) * Tensor(neg_mask)
    neg_sum = T.reduce_sum(neg_exp, axis=1)

    losses = -(T.log(pos_exp) - T.log(pos_exp + neg_sum))
    return T.reduce_mean(losses[anchors])


def supervised_loss(p_yes, y):
    """Binary cross-entropy on the yes-probability, meaned over the batch."""
    p = T.clamp(p_yes, EPS_PROB, 1.0 - EPS_PROB)
    y = Tensor(np.asarray(y, dtype=np.float64))
    per = -(y * T.log(p) + (1.0 - y) * T.log(1.0 - p))
    return T.reduce_mean(per)


def total_loss(l_sup, l_dist, l_mcl, w_dist=0.1, w_mcl=0.1, filtered_count=0):
    """Weighted sum of the three objectives.

    Returns the scalar Tensor (for backward) and a float LossBreakdown.
    """
    for name, comp in (("l_sup", l_sup), ("l_dist", l_dist), ("l_mcl", l_mcl)):
        if not np.isfinite(comp.item() if isinstance(comp, Tensor) else comp):
            raise TrainingStepError(f"non-finite loss component: {name}")
    l_sup = l_sup if isinstance(l_sup, Tensor) else Tensor(l_sup)
    l_dist = l_dist if isinstance(l_dist, Tensor) else Tensor(l_dist)
    l_mcl = l_mcl if isinstance(l_mcl, Tensor) else Tensor(l_mcl)
    total = l_sup + w_dist * l_dist + w_mcl * l_mcl
    breakdown = LossBreakdown(
        l_sup=l_sup.item(), l_dist=l_dist.item(), l_mcl=l_mcl.item(),
        total=total.item(), filtered_count=int(filtered_count),
    )
    return total, breakdown
