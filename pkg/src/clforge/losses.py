"""Training losses over log-probability matrices.

All functions take row-normalized log-probabilities (each row
exponentiates and sums to one) and natural logs throughout.

``ctc_loss`` is the alignment-free sequence loss: the negative log of
the total probability of every blank-augmented frame alignment that
collapses to the target, computed with the forward-backward recursion
in log space. The blank symbol occupies the *last* column of the CTC
matrix. The analytic gradient with respect to the log-probability
matrix is returned alongside the value; the test suite checks both
against exhaustive alignment enumeration.

Conventions:
  * CTC is the total negative log-likelihood of the utterance (no frame
    normalization); CE is the mean over the W+1 teacher-forced
    positions (the W targets followed by the end symbol).
  * The distillation term is a cross-entropy ``-sum p log q`` between
    fixed teacher distributions ``p`` and student distributions ``q``.
    It is non-negative and minimized exactly when the student matches
    the teacher (where it equals the teacher's entropy); formulations
    that drop the minus sign would reward moving *away* from the
    teacher under minimization, so the sign is always included here.
  * Distillation reduction over frames/positions is configurable. The
    default, ``"hybrid"``, mirrors the supervised convention stream by
    stream (CTC distillation sums over frames like the CTC loss, decoder
    distillation averages over positions like the CE loss), so a
    distillation weight of 1 anchors each stream to the teacher exactly
    as strongly as the data pulls it away. ``"sum"`` / ``"mean"`` apply
    one rule to both streams; with ``"sum"`` the decoder stream is
    W+1 times stronger than the CE term it shadows, which in practice
    stops the new task from being learned at all.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InfeasibleAlignment, StructureMismatch

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a normal install
    _HAVE_NUMBA = False

NEG_INF = -np.inf


@dataclass(frozen=True)
class LossConfig:
    """Hybrid/distillation weights: alpha blends CTC vs CE, lam scales KD."""

    alpha: float = 0.3
    lam: float = 1.0
    kd_reduction: str = "hybrid"  # "hybrid" | "sum" | "mean" over frames / positions

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0):
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.lam < 0.0:
            raise ConfigError(f"lam must be >= 0, got {self.lam}")
        if self.kd_reduction not in ("hybrid", "sum", "mean"):
            raise ConfigError(
                f"kd_reduction must be 'hybrid', 'sum' or 'mean', got {self.kd_reduction!r}")


def _expand_labels(target: np.ndarray, blank: int) -> np.ndarray:
    """Interleave blanks around the target: [b, y1, b, y2, ..., yW, b]."""
    ext = np.full(2 * len(target) + 1, blank, dtype=np.int64)
    ext[1::2] = target
    return ext


def _ctc_validate(logprobs, target, blank):
    lp = np.asarray(logprobs, dtype=np.float64)
    if lp.ndim != 2:
        raise StructureMismatch(f"logprobs must be 2-D, got shape {lp.shape}")
    L, K = lp.shape
    y = np.asarray(target, dtype=np.int64).ravel()
    if len(y) < 1:
        raise ValueError("target must contain at least one token")
    if blank is None:
        blank = K - 1
    if not (0 <= blank < K):
        raise ValueError(f"blank column {blank} outside [0, {K})")
    if np.any(y < 0) or np.any(y >= K):
        raise ValueError("target token outside the logprob alphabet")
    if np.any(y == blank):
        raise ValueError("target may not contain the blank symbol")
    repeats = int(np.sum(y[1:] == y[:-1]))
    if L < len(y) + repeats:
        raise InfeasibleAlignment(
            f"no admissible alignment: target needs at least {len(y) + repeats} frames, got {L}"
        )
    return lp, y, blank


def _ctc_alpha_np(em, skip):
    L, S = em.shape
    alpha = np.full((L, S), NEG_INF)
    alpha[0, 0] = em[0, 0]
    if S > 1:
        alpha[0, 1] = em[0, 1]
    for t in range(1, L):
        prev = alpha[t - 1]
        move = np.empty(S)
        move[0] = prev[0]
        np.logaddexp(prev[1:], prev[:-1], out=move[1:])
        if S > 2:
            np.logaddexp(move[2:], np.where(skip[2:], prev[:-2], NEG_INF), out=move[2:])
        alpha[t] = move + em[t]
    return alpha


def _ctc_core_np(em, labels, n_cols):
    L, S = em.shape
    blank = labels[0]
    skip = np.zeros(S, dtype=bool)
    if S > 2:
        skip[2:] = (labels[2:] != blank) & (labels[2:] != labels[:-2])
    alpha = _ctc_alpha_np(em, skip)
    logz = alpha[L - 1, S - 1]
    if S > 1:
        logz = np.logaddexp(logz, alpha[L - 1, S - 2])
    beta = np.full((L, S), NEG_INF)
    beta[L - 1, S - 1] = em[L - 1, S - 1]
    if S > 1:
        beta[L - 1, S - 2] = em[L - 1, S - 2]
    for t in range(L - 2, -1, -1):
        nxt = beta[t + 1]
        move = np.empty(S)
        move[-1] = nxt[-1]
        np.logaddexp(nxt[:-1], nxt[1:], out=move[:-1])
        if S > 2:
            np.logaddexp(move[:-2], np.where(skip[2:], nxt[2:], NEG_INF), out=move[:-2])
        beta[t] = move + em[t]
    # posterior mass through (t, s); alpha and beta both include the
    # emission at t, so it is subtracted once
    post = np.exp(alpha + beta - em - logz)
    grad = np.zeros((L, n_cols))
    for s in range(S):
        grad[:, labels[s]] -= post[:, s]
    return float(logz), grad


if _HAVE_NUMBA:

    @njit(cache=True)
    def _lae(a, b):  # pragma: no cover - exercised through _ctc_core_nb
        if a == -np.inf:
            return b
        if b == -np.inf:
            return a
        m = a if a > b else b
        return m + np.log1p(np.exp(-abs(a - b)))

    @njit(cache=True)
    def _ctc_core_nb(em, labels, n_cols):  # pragma: no cover - numba
        L, S = em.shape
        blank = labels[0]
        skip = np.zeros(S, dtype=np.bool_)
        for s in range(2, S):
            skip[s] = labels[s] != blank and labels[s] != labels[s - 2]
        alpha = np.full((L, S), -np.inf)
        alpha[0, 0] = em[0, 0]
        if S > 1:
            alpha[0, 1] = em[0, 1]
        for t in range(1, L):
            for s in range(S):
                acc = alpha[t - 1, s]
                if s >= 1:
                    acc = _lae(acc, alpha[t - 1, s - 1])
                if s >= 2 and skip[s]:
                    acc = _lae(acc, alpha[t - 1, s - 2])
                alpha[t, s] = acc + em[t, s]
        logz = alpha[L - 1, S - 1]
        if S > 1:
            logz = _lae(logz, alpha[L - 1, S - 2])
        beta = np.full((L, S), -np.inf)
        beta[L - 1, S - 1] = em[L - 1, S - 1]
        if S > 1:
            beta[L - 1, S - 2] = em[L - 1, S - 2]
        for t in range(L - 2, -1, -1):
            for s in range(S):
                acc = beta[t + 1, s]
                if s + 1 < S:
                    acc = _lae(acc, beta[t + 1, s + 1])
                if s + 2 < S and skip[s + 2]:
                    acc = _lae(acc, beta[t + 1, s + 2])
                beta[t, s] = acc + em[t, s]
        grad = np.zeros((L, n_cols))
        for t in range(L):
            for s in range(S):
                occ = alpha[t, s] + beta[t, s] - em[t, s] - logz
                if occ > -np.inf:
                    grad[t, labels[s]] -= np.exp(occ)
        return logz, grad

    @njit(cache=True)
    def _ctc_value_nb(em, labels):  # pragma: no cover - numba
        L, S = em.shape
        blank = labels[0]
        skip = np.zeros(S, dtype=np.bool_)
        for s in range(2, S):
            skip[s] = labels[s] != blank and labels[s] != labels[s - 2]
        prev = np.full(S, -np.inf)
        prev[0] = em[0, 0]
        if S > 1:
            prev[1] = em[0, 1]
        cur = np.empty(S)
        for t in range(1, L):
            for s in range(S):
                acc = prev[s]
                if s >= 1:
                    acc = _lae(acc, prev[s - 1])
                if s >= 2 and skip[s]:
                    acc = _lae(acc, prev[s - 2])
                cur[s] = acc + em[t, s]
            prev, cur = cur.copy(), prev
        logz = prev[S - 1]
        if S > 1:
            logz = _lae(logz, prev[S - 2])
        return logz


def ctc_loss(logprobs, target, blank=None):
    """Alignment-marginal negative log-likelihood and its gradient.

    Returns ``(loss, grad)`` where ``grad`` has the shape of
    ``logprobs`` and holds d(loss)/d(logprobs) treating the entries as
    free variables. Raises InfeasibleAlignment when the frame count
    cannot accommodate the expanded target.
    """
    lp, y, blank = _ctc_validate(logprobs, target, blank)
    labels = _expand_labels(y, blank)
    em = np.ascontiguousarray(lp[:, labels])
    if _HAVE_NUMBA:
        logz, grad = _ctc_core_nb(em, labels, lp.shape[1])
    else:
        logz, grad = _ctc_core_np(em, labels, lp.shape[1])
    return float(-logz), grad


def ctc_loss_value(logprobs, target, blank=None) -> float:
    """Loss only (forward recursion, no gradient); used for validation passes."""
    lp, y, blank = _ctc_validate(logprobs, target, blank)
    labels = _expand_labels(y, blank)
    em = np.ascontiguousarray(lp[:, labels])
    if _HAVE_NUMBA:
        return float(-_ctc_value_nb(em, labels))
    blank_col = labels[0]
    skip = np.zeros(len(labels), dtype=bool)
    if len(labels) > 2:
        skip[2:] = (labels[2:] != blank_col) & (labels[2:] != labels[:-2])
    alpha = _ctc_alpha_np(em, skip)
    logz = alpha[-1, -1]
    if len(labels) > 1:
        logz = np.logaddexp(logz, alpha[-1, -2])
    return float(-logz)


def _ce_refs(dec_logprobs, target, eos_col):
    lp = np.asarray(dec_logprobs, dtype=np.float64)
    y = np.asarray(target, dtype=np.int64).ravel()
    if lp.ndim != 2:
        raise StructureMismatch(f"dec_logprobs must be 2-D, got shape {lp.shape}")
    if lp.shape[0] != len(y) + 1:
        raise StructureMismatch(
            f"dec_logprobs has {lp.shape[0]} rows, target of length {len(y)} needs {len(y) + 1}"
        )
    if eos_col is None:
        eos_col = lp.shape[1] - 1
    refs = np.append(y, eos_col)
    if np.any(refs < 0) or np.any(refs >= lp.shape[1]):
        raise StructureMismatch("reference symbol outside the decoder alphabet")
    return lp, refs


def ce_loss(dec_logprobs, target, eos_col=None) -> float:
    """Mean negative reference log-probability over the W+1 positions."""
    lp, refs = _ce_refs(dec_logprobs, target, eos_col)
    return float(-lp[np.arange(len(refs)), refs].mean())


def ce_loss_and_grad(dec_logprobs, target, eos_col=None):
    lp, refs = _ce_refs(dec_logprobs, target, eos_col)
    n = len(refs)
    picked = lp[np.arange(n), refs]
    grad = np.zeros_like(lp)
    grad[np.arange(n), refs] = -1.0 / n
    return float(-picked.mean()), grad


def _kd_pair(t_lp, s_lp, scale):
    t_lp = np.asarray(t_lp, dtype=np.float64)
    s_lp = np.asarray(s_lp, dtype=np.float64)
    if t_lp.shape != s_lp.shape:
        raise StructureMismatch(f"teacher/student shapes differ: {t_lp.shape} vs {s_lp.shape}")
    p = np.exp(t_lp)
    with np.errstate(invalid="ignore"):
        prod = np.where(p > 0.0, p * s_lp, 0.0)
    return float(-prod.sum() * scale)


def _kd_scales(teacher, reduction):
    s_ctc = s_dec = 1.0
    if reduction == "mean":
        s_ctc = 1.0 / teacher.ctc_logprobs.shape[0]
        s_dec = 1.0 / teacher.dec_logprobs.shape[0]
    elif reduction == "hybrid":  # per-stream scale of the supervised loss
        s_dec = 1.0 / teacher.dec_logprobs.shape[0]
    return s_ctc, s_dec


def kd_loss(teacher, student, alpha, reduction="hybrid") -> float:
    """Cross-entropy of student log-probs under fixed teacher distributions.

    ``teacher`` and ``student`` need ``ctc_logprobs`` / ``dec_logprobs``
    attributes computed on the same utterance. The two streams are
    blended with the same alpha as the hybrid loss. No gradient flows
    into the teacher.
    """
    s_ctc, s_dec = _kd_scales(teacher, reduction)
    out = 0.0
    if alpha > 0.0:
        out += alpha * _kd_pair(teacher.ctc_logprobs, student.ctc_logprobs, s_ctc)
    if alpha < 1.0:
        out += (1.0 - alpha) * _kd_pair(teacher.dec_logprobs, student.dec_logprobs, s_dec)
    return out


def kd_teacher_grads(teacher, alpha, reduction="hybrid"):
    """Gradients of kd_loss w.r.t. the student log-prob matrices.

    Because d(-sum p log q)/d(log q) = -p, these depend on the teacher
    only. Returns (d_ctc, d_dec); a stream with zero weight yields None.
    """
    s_ctc, s_dec = _kd_scales(teacher, reduction)
    d_ctc = -alpha * s_ctc * np.exp(teacher.ctc_logprobs) if alpha > 0.0 else None
    d_dec = -(1.0 - alpha) * s_dec * np.exp(teacher.dec_logprobs) if alpha < 1.0 else None
    return d_ctc, d_dec


def hybrid_loss(ctc: float, ce: float, alpha: float) -> float:
    """alpha-blend of the CTC and decoder CE terms."""
    return alpha * ctc + (1.0 - alpha) * ce


def total_loss(hybrid: float, kd: float, lam: float) -> float:
    """Training objective: hybrid term plus lam-weighted distillation."""
    return hybrid + lam * kd
