"""CTC loss, greedy decoding, forced alignment, and confidence extraction.

The loss is a log-space forward/backward DP over the blank-interleaved
target; its gradient w.r.t. the logits is softmax minus the posterior
occupancy, wired into the autodiff graph as a single op.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .alignment import BLANK_ID, add_blank, collapse_path, repeats_from_path

NEG_INF = -np.inf


class InfeasibleTarget(ValueError):
    """Target cannot be emitted in the given number of frames."""


def _expand_target(char_ids):
    ext = add_blank(char_ids)
    return np.asarray(ext, dtype=np.int64)


def _min_frames(char_ids):
    # each character needs a frame; equal neighbours also need a separating blank
    n = len(char_ids)
    seps = sum(1 for a, b in zip(char_ids, char_ids[1:]) if a == b)
    return n + seps


def _check_feasible(t_frames, char_ids):
    need = _min_frames(char_ids)
    if t_frames < need:
        raise InfeasibleTarget(
            f"target of length {len(char_ids)} needs >= {need} frames, got {t_frames}")


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _forward_backward(logp: np.ndarray, ext: np.ndarray):
    """Alpha/beta lattices over the extended target, in log space."""
    t_frames, _ = logp.shape
    s = ext.size
    emit = logp[:, ext]  # (T, S)

    # transition structure: from s, s-1, and s-2 when a skip is legal
    skip_ok = np.zeros(s, dtype=bool)
    skip_ok[2:] = (ext[2:] != BLANK_ID) & (ext[2:] != ext[:-2])

    alpha = np.full((t_frames, s), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if s > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, t_frames):
        prev = alpha[t - 1]
        stay = prev
        step = np.concatenate(([NEG_INF], prev[:-1]))[:s]
        skip = np.concatenate(([NEG_INF, NEG_INF], prev[:-2]))[:s]
        skip = np.where(skip_ok, skip, NEG_INF)
        alpha[t] = _lse3(stay, step, skip) + emit[t]

    beta = np.full((t_frames, s), NEG_INF)
    beta[-1, -1] = 0.0
    if s > 1:
        beta[-1, -2] = 0.0
    fwd_skip_ok = np.zeros(s, dtype=bool)
    fwd_skip_ok[:-2] = skip_ok[2:]
    for t in range(t_frames - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        stay = nxt
        step = np.concatenate((nxt[1:], [NEG_INF]))[:s]
        skip = np.concatenate((nxt[2:], [NEG_INF, NEG_INF]))[:s]
        skip = np.where(fwd_skip_ok, skip, NEG_INF)
        beta[t] = _lse3(stay, step, skip)

    ll = np.logaddexp(alpha[-1, -1], alpha[-1, -2] if s > 1 else NEG_INF)
    return alpha, beta, ll


def _lse3(a, b, c):
    return np.logaddexp(np.logaddexp(a, b), c)


@dataclass
class CtcLossResult:
    loss: float
    grad_logits: np.ndarray  # d(-log p)/d logits, (T, V)


def ctc_loss_value(logits: np.ndarray, char_ids) -> CtcLossResult:
    """Negative log-likelihood and its gradient w.r.t. the raw logits."""
    logits = np.asarray(logits, dtype=np.float64)
    t_frames, vocab = logits.shape
    _check_feasible(t_frames, char_ids)
    ext = _expand_target(char_ids)
    logp = _log_softmax(logits)
    alpha, beta, ll = _forward_backward(logp, ext)

    # occupancy gamma(t, s) in log space, folded into per-class posterior
    occ = alpha + beta - ll
    post = np.zeros_like(logits)
    occ_p = np.exp(occ)
    for s, k in enumerate(ext):
        post[:, k] += occ_p[:, s]
    grad = np.exp(logp) - post
    return CtcLossResult(loss=float(-ll), grad_logits=grad)


def ctc_loss(logits: T.Tensor, char_ids) -> T.Tensor:
    """CTC loss as a differentiable scalar graph node."""
    res = ctc_loss_value(logits.data, char_ids)
    grad = res.grad_logits.astype(logits.data.dtype)
    y = np.asarray(res.loss, dtype=logits.data.dtype)

    def bwd(g):
        if logits.requires_grad:
            T._accum(logits, g * grad)

    return T._make(y, (logits,), bwd, "ctc_loss")


@dataclass
class Hypothesis:
    """Greedy decode state carried through iterative refinement."""

    frame_path: list  # token id per frame
    frame_probs: np.ndarray  # chosen-token probability per frame
    char_ids: list  # collapsed text


def greedy_decode(logits: np.ndarray) -> Hypothesis:
    """Framewise argmax path; ties break toward the lowest token index."""
    logits = np.asarray(logits, dtype=np.float64)
    probs = np.exp(_log_softmax(logits))
    path = np.argmax(probs, axis=-1)  # argmax takes the first (lowest) index on ties
    chosen = probs[np.arange(len(path)), path]
    return Hypothesis(frame_path=path.tolist(), frame_probs=chosen,
                      char_ids=collapse_path(path.tolist()))


def viterbi_align(logits: np.ndarray, char_ids):
    """Max-probability frame path constrained to collapse to the target."""
    logits = np.asarray(logits, dtype=np.float64)
    t_frames, _ = logits.shape
    _check_feasible(t_frames, char_ids)
    ext = _expand_target(char_ids)
    s = ext.size
    logp = _log_softmax(logits)
    emit = logp[:, ext]

    skip_ok = np.zeros(s, dtype=bool)
    skip_ok[2:] = (ext[2:] != BLANK_ID) & (ext[2:] != ext[:-2])

    score = np.full((t_frames, s), NEG_INF)
    back = np.zeros((t_frames, s), dtype=np.int64)
    score[0, 0] = emit[0, 0]
    if s > 1:
        score[0, 1] = emit[0, 1]
    for t in range(1, t_frames):
        prev = score[t - 1]
        stay = prev
        step = np.concatenate(([NEG_INF], prev[:-1]))
        skip = np.concatenate(([NEG_INF, NEG_INF], prev[:-2]))
        skip = np.where(skip_ok, skip, NEG_INF)
        best = np.stack([stay, step, skip])
        choice = np.argmax(best, axis=0)
        score[t] = best[choice, np.arange(s)] + emit[t]
        back[t] = np.arange(s) - choice

    end = s - 1
    if s > 1 and score[-1, s - 2] > score[-1, s - 1]:
        end = s - 2
    if not np.isfinite(score[-1, end]):
        raise InfeasibleTarget("no valid path for target")
    states = [end]
    for t in range(t_frames - 1, 0, -1):
        states.append(back[t, states[-1]])
    states.reverse()
    path = [int(ext[i]) for i in states]
    return repeats_from_path(path, list(char_ids))


def char_confidences(hyp: Hypothesis) -> np.ndarray:
    """Mean chosen-token probability over each emitted character's frame run."""
    confs = []
    run_sum, run_len = 0.0, 0
    prev = None
    for tok, p in zip(hyp.frame_path, hyp.frame_probs):
        if tok != prev:
            if prev is not None and prev != BLANK_ID:
                confs.append(run_sum / run_len)
            run_sum, run_len = 0.0, 0
        run_sum += p
        run_len += 1
        prev = tok
    if prev is not None and prev != BLANK_ID:
        confs.append(run_sum / run_len)
    return np.asarray(confs)
