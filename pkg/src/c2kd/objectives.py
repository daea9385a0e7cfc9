"""Similarity matrices and the contrastive / distillation objectives.

Each loss has a ``*_with_grad`` twin returning ``(loss, dL/dS)`` so the
trainer can backpropagate into the student's embeddings. Teacher matrices
never receive gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ContractError, DimensionError, ParameterError
from .kernel import log_softmax_rows, softmax_rows, softmax_rows_backward

OBJECTIVES = ("cross_entropy", "smooth_l1", "softmax_smooth_l1")


@dataclass
class SimilarityMatrix:
    scores: np.ndarray
    language: str | None = None
    ids: tuple | None = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 2 or self.scores.shape[0] != self.scores.shape[1]:
            raise DimensionError(f"similarity matrix must be square, got {self.scores.shape}")

    def __array__(self, dtype=None, copy=None):
        return self.scores if dtype is None else self.scores.astype(dtype)

    @property
    def batch_size(self) -> int:
        return self.scores.shape[0]


def _scores(s) -> np.ndarray:
    arr = s.scores if isinstance(s, SimilarityMatrix) else np.asarray(s, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise DimensionError(f"similarity matrix must be square, got {arr.shape}")
    return arr


def _same_batch(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"batch mismatch: {a.shape} vs {b.shape}")


def _check_tau(tau: float, name: str = "tau") -> None:
    if not tau > 0:
        raise ParameterError(f"{name} must be positive, got {tau}")


def similarity_matrix(text_embs, video_embs, language: str | None = None, ids=None) -> SimilarityMatrix:
    """S = T Vᵀ for row-normalized text and video embeddings."""
    t = np.asarray(text_embs, dtype=np.float64)
    v = np.asarray(video_embs, dtype=np.float64)
    if t.ndim != 2 or v.ndim != 2 or t.shape != v.shape:
        raise DimensionError(f"text embeddings {t.shape} and video embeddings {v.shape} must match")
    for what, x in (("text", t), ("video", v)):
        dev = np.abs(np.linalg.norm(x, axis=1) - 1.0)
        if dev.size and dev.max() > 1e-6:
            raise ContractError(f"{what} row {int(dev.argmax())} is not unit norm (deviation {dev.max():.2e})")
    return SimilarityMatrix(t @ v.T, language=language, ids=ids)


def one_hot_targets(batch_size: int) -> np.ndarray:
    return np.eye(batch_size)


def _soft_ce(p: np.ndarray, s: np.ndarray, tau: float) -> tuple[float, np.ndarray]:
    logq = log_softmax_rows(s, tau)
    loss = -float((p * logq).sum())
    # rows of p sum to one, so d/dS = (Q - P)/tau
    grad = (np.exp(logq) * p.sum(axis=1, keepdims=True) - p) / tau
    return loss, grad


def _check_stochastic(p: np.ndarray) -> None:
    if p.min(initial=0.0) < 0 or np.abs(p.sum(axis=1) - 1.0).max(initial=0.0) > 1e-9:
        raise ContractError("target distribution rows must be non-negative and sum to 1")


def cross_entropy_soft_with_grad(p, s, tau: float) -> tuple[float, np.ndarray]:
    _check_tau(tau)
    s = _scores(s)
    p = np.asarray(p, dtype=np.float64)
    _same_batch(p, s)
    _check_stochastic(p)
    return _soft_ce(p, s, tau)


def cross_entropy_soft(p, s, tau: float) -> float:
    """-Σ_i Σ_j P_ij log Q_ij with Q the row softmax of S/τ."""
    return cross_entropy_soft_with_grad(p, s, tau)[0]


def nce_loss_with_grad(s, tau: float, symmetric: bool = False) -> tuple[float, np.ndarray]:
    _check_tau(tau)
    s = _scores(s)
    eye = one_hot_targets(s.shape[0])
    loss, grad = _soft_ce(eye, s, tau)
    if symmetric:
        lt, gt = _soft_ce(eye, s.T, tau)
        loss, grad = loss + lt, grad + gt.T
    return loss, grad


def nce_loss(s, tau: float, symmetric: bool = False) -> float:
    """Text-to-video InfoNCE summed over the batch (add video-to-text with ``symmetric``)."""
    return nce_loss_with_grad(s, tau, symmetric)[0]


def c2kd_loss_with_grad(student, teacher_pooled, tau_prime: float, symmetric: bool = False):
    _check_tau(tau_prime, "tau_prime")
    s = _scores(student)
    t = _scores(teacher_pooled)
    _same_batch(s, t)
    loss, grad = _soft_ce(softmax_rows(t, tau_prime), s, tau_prime)
    if symmetric:
        lt, gt = _soft_ce(softmax_rows(t.T, tau_prime), s.T, tau_prime)
        loss, grad = loss + lt, grad + gt.T
    return loss, grad


def c2kd_loss(student, teacher_pooled, tau_prime: float, symmetric: bool = False) -> float:
    """Cross entropy from the teacher's softened rows to the student's, both at τ′."""
    return c2kd_loss_with_grad(student, teacher_pooled, tau_prime, symmetric)[0]


def _smooth_l1(r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.abs(r)
    quad = a < 1.0
    return np.where(quad, 0.5 * r * r, a - 0.5), np.where(quad, r, np.sign(r))


def smooth_l1_distill_with_grad(student, teacher_pooled, normalize_first: bool = False, tau_prime: float = 0.1):
    s = _scores(student)
    t = _scores(teacher_pooled)
    _same_batch(s, t)
    if normalize_first:
        _check_tau(tau_prime, "tau_prime")
        qs = softmax_rows(s, tau_prime)
        val, d = _smooth_l1(qs - softmax_rows(t, tau_prime))
        return float(val.mean()), softmax_rows_backward(d / d.size, qs, tau_prime)
    val, d = _smooth_l1(s - t)
    return float(val.mean()), d / d.size


def smooth_l1_distill(student, teacher_pooled, normalize_first: bool = False, tau_prime: float = 0.1) -> float:
    """Mean elementwise Smooth-L1 (transition at 1) between student and teacher scores."""
    return smooth_l1_distill_with_grad(student, teacher_pooled, normalize_first, tau_prime)[0]


def distill_with_grad(objective: str, student, teacher, tau_prime: float, symmetric: bool = False):
    if objective == "cross_entropy":
        return c2kd_loss_with_grad(student, teacher, tau_prime, symmetric)
    if objective == "smooth_l1":
        return smooth_l1_distill_with_grad(student, teacher, False, tau_prime)
    if objective == "softmax_smooth_l1":
        return smooth_l1_distill_with_grad(student, teacher, True, tau_prime)
    raise ParameterError(f"unknown distillation objective {objective!r}; expected one of {OBJECTIVES}")


@dataclass
class LossBreakdown:
    total: float
    nce: float
    c2kd: float
    alpha: float
    nce_per_language: dict[str, float] = field(default_factory=dict)
    c2kd_per_language: dict[str, float] = field(default_factory=dict)
    score_grads: list[np.ndarray] | None = field(default=None, repr=False)


def _teacher_lists(teacher_pooled, n_languages: int) -> list[list[np.ndarray]]:
    """Normalize the teacher argument to one list of target matrices per language."""
    if teacher_pooled is None:
        return [[] for _ in range(n_languages)]
    if isinstance(teacher_pooled, (SimilarityMatrix, np.ndarray)):
        return [[_scores(teacher_pooled)]] * n_languages
    entries = list(teacher_pooled)
    if len(entries) != n_languages:
        raise DimensionError(f"{len(entries)} teacher entries for {n_languages} languages")
    out = []
    for e in entries:
        if isinstance(e, (SimilarityMatrix, np.ndarray)):
            out.append([_scores(e)])
        else:
            out.append([_scores(m) for m in e])
    return out


def combined_loss(
    s_per_language: Sequence,
    teacher_pooled,
    tau: float,
    tau_prime: float,
    alpha: float,
    *,
    languages: Sequence[str] | None = None,
    objective: str = "cross_entropy",
    symmetric: bool = False,
    with_grads: bool = False,
) -> LossBreakdown:
    """α·Σ_l NCE(S^l) + (1-α)·Σ_l distill(S^l, S′).

    ``teacher_pooled`` is either one matrix shared by all languages, or one
    entry per language; an entry that is itself a list holds per-teacher
    matrices whose distillation losses are summed (no pooling). ``None``
    means no teachers, which only makes sense with α=1.
    Gradients are only accumulated for terms with non-zero weight, so α=1
    reproduces a pure-NCE update bit for bit.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ParameterError(f"alpha must lie in [0, 1], got {alpha}")
    if teacher_pooled is None and alpha != 1.0:
        raise ParameterError("a distillation weight (alpha < 1) needs teacher matrices")
    mats = [_scores(s) for s in s_per_language]
    if not mats:
        raise ParameterError("combined_loss needs at least one language matrix")
    for m in mats[1:]:
        _same_batch(mats[0], m)
    if languages is None:
        languages = [getattr(s, "language", None) or str(i) for i, s in enumerate(s_per_language)]
    targets = _teacher_lists(teacher_pooled, len(mats))

    nce_total = 0.0
    kd_total = 0.0
    out = LossBreakdown(0.0, 0.0, 0.0, alpha)
    grads = []
    for lang, s, tlist in zip(languages, mats, targets):
        ln, gn = nce_loss_with_grad(s, tau, symmetric)
        lk = 0.0
        gk = np.zeros_like(s)
        for t in tlist:
            _same_batch(s, t)
            l_, g_ = distill_with_grad(objective, s, t, tau_prime, symmetric)
            lk += l_
            gk = gk + g_
        out.nce_per_language[lang] = ln
        out.c2kd_per_language[lang] = lk
        nce_total += ln
        kd_total += lk
        if with_grads:
            if alpha == 1.0:
                grads.append(gn)
            elif alpha == 0.0:
                grads.append(gk)
            else:
                grads.append(alpha * gn + (1.0 - alpha) * gk)
    out.nce = nce_total
    out.c2kd = kd_total
    out.total = alpha * nce_total + (1.0 - alpha) * kd_total
    if with_grads:
        out.score_grads = grads
    return out


def row_entropy_sum(p: np.ndarray) -> float:
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return -float(terms.sum())
