"""Training objectives for the joint CTC/attention recognizer.

All losses return scalar tensors that participate in autodiff graphs. The
CTC loss is a single custom graph node: its forward pass runs the log-space
alignment recursion and its backward pass injects the exact posterior-based
gradient with respect to the input log-probabilities. Everything else is
composed from the primitive op set.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


class UnalignableError(ValueError):
    """Label sequence cannot be aligned to the available frames."""


@dataclass
class LossConfig:
    """Weights for the hybrid objective and the expansion regularizers.

    ``ctc_weight`` is the mixing factor on the CTC term (attention CE gets
    the complement). ``kld_weight`` and ``wca_weight`` scale the baseline
    regularizers and are exposed because no canonical values exist for them.
    """

    ctc_weight: float = 0.3
    label_smoothing: float = 0.1
    kld_weight: float = 0.5
    wca_weight: float = 0.01

    def __post_init__(self):
        if not 0.0 < self.ctc_weight < 1.0:
            raise ValueError(f"ctc_weight must be in (0, 1), got {self.ctc_weight}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError(f"label_smoothing must be in [0, 1), got {self.label_smoothing}")
        if self.kld_weight < 0 or self.wca_weight < 0:
            raise ValueError("regularizer weights must be non-negative")


def _extend_with_blanks(labels: Sequence[int], blank: int) -> np.ndarray:
    ext = np.full(2 * len(labels) + 1, blank, dtype=np.int64)
    ext[1::2] = labels
    return ext


def min_alignable_frames(labels: Sequence[int]) -> int:
    """Fewest frames that can collapse to ``labels``: one per symbol plus a
    separating blank between adjacent repeats."""
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


def _validate_ctc_args(lp: np.ndarray, labels: Sequence[int], blank: int) -> None:
    if lp.ndim != 2:
        raise ShapeError(f"ctc_loss: log_probs must be U x V, got {lp.shape}")
    U, V = lp.shape
    for y in labels:
        if not 0 <= y < V:
            raise ValueError(f"ctc_loss: label {y} outside vocabulary of size {V}")
        if y == blank:
            raise ValueError("ctc_loss: labels must not contain the blank symbol")
    need = min_alignable_frames(labels)
    if U < need:
        raise UnalignableError(
            f"cannot align {len(labels)} labels (needs >= {need} frames) to {U} frames"
        )


def _skip_allowed(ext: np.ndarray, blank: int) -> np.ndarray:
    # arriving at state s from s-2 is legal iff s is a non-blank state that
    # differs from the state two back
    S = len(ext)
    ok = np.zeros(S, dtype=bool)
    if S > 2:
        ok[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    return ok


def _ctc_alpha(lp: np.ndarray, ext: np.ndarray, blank: int) -> np.ndarray:
    U = lp.shape[0]
    S = len(ext)
    skip_ok = _skip_allowed(ext, blank)
    alpha = np.full((U, S), -np.inf)
    alpha[0, 0] = lp[0, ext[0]]
    if S > 1:
        alpha[0, 1] = lp[0, ext[1]]
    for t in range(1, U):
        prev = alpha[t - 1]
        cur = prev.copy()
        cur[1:] = np.logaddexp(cur[1:], prev[:-1])
        if S > 2:
            skipped = np.where(skip_ok[2:], prev[:-2], -np.inf)
            cur[2:] = np.logaddexp(cur[2:], skipped)
        alpha[t] = cur + lp[t, ext]
    return alpha


def _ctc_beta(lp: np.ndarray, ext: np.ndarray, blank: int) -> np.ndarray:
    # beta[t, s]: log-probability of completing the alignment from state s
    # after frame t's emission has already been counted
    U = lp.shape[0]
    S = len(ext)
    skip_ok = _skip_allowed(ext, blank)
    beta = np.full((U, S), -np.inf)
    beta[U - 1, S - 1] = 0.0
    if S > 1:
        beta[U - 1, S - 2] = 0.0
    for t in range(U - 2, -1, -1):
        nxt = beta[t + 1] + lp[t + 1, ext]
        cur = nxt.copy()
        cur[:-1] = np.logaddexp(cur[:-1], nxt[1:])
        if S > 2:
            skipped = np.where(skip_ok[2:], nxt[2:], -np.inf)
            cur[:-2] = np.logaddexp(cur[:-2], skipped)
        beta[t] = cur
    return beta


def ctc_log_prob(lp: np.ndarray, labels: Sequence[int], blank: int = 0) -> float:
    """log p(labels | log-prob matrix), marginalized over all alignments."""
    lp = np.asarray(lp, dtype=np.float64)
    _validate_ctc_args(lp, labels, blank)
    ext = _extend_with_blanks(labels, blank)
    alpha = _ctc_alpha(lp, ext, blank)
    if len(ext) > 1:
        return float(np.logaddexp(alpha[-1, -1], alpha[-1, -2]))
    return float(alpha[-1, -1])


def ctc_loss(log_probs: Tensor, labels: Sequence[int], blank: int = 0) -> Tensor:
    """-log p(labels) under the blank-augmented alignment model.

    ``log_probs`` must be a U x V matrix of per-frame log-distributions
    (rows already log-softmaxed). Raises UnalignableError instead of
    returning a non-finite loss when U is too small for the labels.
    """
    lp = log_probs.data
    _validate_ctc_args(lp, labels, blank)
    labels = list(labels)
    ext = _extend_with_blanks(labels, blank)
    alpha = _ctc_alpha(lp, ext, blank)
    if len(ext) > 1:
        logp = np.logaddexp(alpha[-1, -1], alpha[-1, -2])
    else:
        logp = alpha[-1, -1]
    if not np.isfinite(logp):
        raise UnalignableError("alignment probability underflowed to zero")

    def backward_fn(g):
        if not log_probs.requires_grad:
            return (None,)
        beta = _ctc_beta(lp, ext, blank)
        gamma = alpha + beta  # log joint mass through state s at frame t
        grad = np.zeros_like(lp)
        for v in np.unique(ext):
            cols = gamma[:, ext == v]
            m = cols.max(axis=1)
            reachable = m > -np.inf
            if np.any(reachable):
                mr = m[reachable]
                post = np.exp(mr - logp) * np.exp(cols[reachable] - mr[:, None]).sum(axis=1)
                grad[reachable, v] = -post
        return (g * grad,)

    return ad._make("ctc_loss", np.asarray(-logp), (log_probs,), backward_fn)


def aed_loss(logits: Tensor, labels: Sequence[int], smoothing: float, eos: int) -> Tensor:
    """Label-smoothed cross-entropy of the attention decoder against
    ``labels + [eos]``, averaged over positions.

    The smoothing mass is spread uniformly over the non-target symbols.
    """
    n, v = logits.data.shape if logits.data.ndim == 2 else (None, None)
    targets = list(labels) + [eos]
    if n != len(targets):
        raise ShapeError(
            f"aed_loss: logits rows {logits.data.shape} do not match "
            f"{len(targets)} target positions"
        )
    q = np.full((n, v), smoothing / (v - 1))
    q[np.arange(n), targets] = 1.0 - smoothing
    lp = ad.log_softmax(logits)
    return ad.scale(ad.reduce_sum(ad.mul(lp, Tensor(q))), -1.0 / n)


def hybrid_loss(ctc: Tensor, aed: Tensor, ctc_weight: float) -> Tensor:
    """ctc_weight * ctc + (1 - ctc_weight) * aed."""
    return ad.add(ad.scale(ctc, ctc_weight), ad.scale(aed, 1.0 - ctc_weight))


def wca_penalty(
    params: Mapping[str, Tensor],
    snapshot: Mapping[str, np.ndarray] | None,
    weight: float,
    frozen: frozenset[str] | set[str] = frozenset(),
) -> Tensor:
    """(weight/2) * sum of squared L2 drift from the snapshot values.

    Only unfrozen parameters are penalized; frozen ones cannot drift, so
    including them would be dead weight. Gradient is weight * (theta -
    theta0) elementwise.
    """
    if snapshot is None:
        raise ValueError("wca_penalty: no parameter snapshot has been taken")
    total: Tensor | None = None
    for name, p in params.items():
        if name in frozen:
            continue
        ref = snapshot[name]
        diff = ad.add(p, Tensor(-ref))
        sq = ad.reduce_sum(ad.mul(diff, diff))
        total = sq if total is None else ad.add(total, sq)
    if total is None:
        return Tensor(0.0)
    return ad.scale(total, 0.5 * weight)


def kld_penalty(student_log_probs: Tensor, teacher_log_probs, weight: float) -> Tensor:
    """weight * mean-over-frames KL(teacher || student).

    The teacher distribution is a constant (no gradient flows into it);
    pass the frozen model's log-probs as an array or a non-grad tensor.
    """
    t = teacher_log_probs.data if isinstance(teacher_log_probs, Tensor) else np.asarray(teacher_log_probs)
    if t.shape != student_log_probs.data.shape:
        raise ShapeError(
            f"kld_penalty: teacher shape {t.shape} != student shape "
            f"{student_log_probs.data.shape}"
        )
    frames = t.shape[0] if t.ndim == 2 else 1
    tp = np.exp(t)
    diff = ad.add(Tensor(t), ad.scale(student_log_probs, -1.0))
    return ad.scale(ad.reduce_sum(ad.mul(Tensor(tp), diff)), weight / frames)
