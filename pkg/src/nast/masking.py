"""Seeded masking schedules for text and speech streams.

Three schedules: uniform character masking for text, span masking over
speech frames (wav2vec-style), and corner masking over the time/frequency
plane used by iterative synthesis refinement. Masked speech frames/cells
are exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .alignment import BLANK_ID, MASK_ID


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def _rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass
class MaskedStream:
    """A modality stream with per-position mask flags."""

    payload: object  # token id list or (T, F) float array
    flags: np.ndarray  # bool per position (per frame for speech)
    schedule: str = "none"

    def __post_init__(self):
        n = len(self.payload)
        self.flags = np.asarray(self.flags, dtype=bool)
        if self.flags.shape[0] != n:
            raise ValueError("mask flags length must match payload")


def mask_text(char_ids, p: float, seed) -> tuple[list, np.ndarray]:
    """Replace exactly round(p*|Y|) characters with <mask>, uniformly without replacement."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    n = len(char_ids)
    k = _round_half_up(p * n)
    flags = np.zeros(n, dtype=bool)
    if k > 0:
        picks = _rng(seed).choice(n, size=k, replace=False)
        flags[picks] = True
    masked = [MASK_ID if f else c for c, f in zip(char_ids, flags)]
    return masked, flags


def propagate_blank_masks(blank_tokens) -> tuple[list, np.ndarray]:
    """Mask each blank whose preceding character is masked; never the first blank.

    Input is a blank-interleaved token sequence that may contain <mask> at
    character positions (odd indices).
    """
    out = list(blank_tokens)
    flags = np.zeros(len(out), dtype=bool)
    for i, tok in enumerate(out):
        if i % 2 == 1 and tok == MASK_ID:
            flags[i] = True
            flags[i + 1] = True
            out[i + 1] = MASK_ID
    if out and out[0] == BLANK_ID:
        flags[0] = False
    return out, flags


def mask_speech_spans(x: np.ndarray, p: float, m: int, seed) -> MaskedStream:
    """wav2vec-style span masking: round(p*T) start frames, each zeroing M frames.

    Spans clip at the sequence end. p=1 zeroes every frame.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    if m < 1:
        raise ValueError("span length M must be >= 1")
    x = np.asarray(x, dtype=np.float64 if x.dtype == np.float64 else np.float32)
    t = x.shape[0]
    k = _round_half_up(p * t)
    flags = np.zeros(t, dtype=bool)
    if k > 0:
        starts = _rng(seed).choice(t, size=k, replace=False)
        for s in starts:
            flags[s:s + m] = True
    out = x.copy()
    out[flags] = 0.0
    return MaskedStream(out, flags, "X1")


def mask_speech_corner(x: np.ndarray, p: float, seed=None) -> MaskedStream:
    """Keep the leading [0, t0) x [0, f0) corner with t0=floor((1-p)T), f0=floor((1-p)F).

    p is the masked fraction per axis, so p=1 zeroes everything and p=0 is
    the identity. Frame flags mark frames with any masked cell.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    x = np.asarray(x, dtype=np.float64 if x.dtype == np.float64 else np.float32)
    t, f = x.shape
    t0 = int(np.floor((1.0 - p) * t))
    f0 = int(np.floor((1.0 - p) * f))
    out = np.zeros_like(x)
    out[:t0, :f0] = x[:t0, :f0]
    flags = np.ones(t, dtype=bool)
    if f0 == f:
        flags[:t0] = False
    return MaskedStream(out, flags, "X2")


def corner_bounds(t: int, f: int, p: float) -> tuple[int, int]:
    """The kept-corner extents (t0, f0) used by mask_speech_corner."""
    return int(np.floor((1.0 - p) * t)), int(np.floor((1.0 - p) * f))


def span_coverage_expectation(t: int, p: float, m: int) -> float:
    """Exact expected number of masked frames under mask_speech_spans.

    Frame i is masked iff one of its min(M, i+1) eligible start frames is
    among the k sampled starts; P(none chosen) = C(T-n_i, k)/C(T, k).
    """
    from math import comb

    k = _round_half_up(p * t)
    if k == 0:
        return 0.0
    total = 0.0
    for i in range(t):
        n_i = min(m, i + 1)
        if t - n_i < k:
            total += 1.0
        else:
            total += 1.0 - comb(t - n_i, k) / comb(t, k)
    return total
