"""Iterative mask-predict refinement for recognition and synthesis.

Recognition: after a first plain pass, low-confidence characters (with
their frame repetitions and following blanks) are masked and the partial
hypothesis is fed back together with the unmasked speech. Synthesis: the
predicted mel canvas is committed corner-by-corner over K passes, feeding
each partially kept canvas back with the unmasked text.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .alignment import BLANK_ID, MASK_ID, add_blank, repeats_from_path
from .ctc import char_confidences, greedy_decode
from .model import Model


@dataclass
class RefineConfig:
    k: int = 4
    threshold_start: float = 0.99
    threshold_end: float = 0.90
    repredict_all: bool = False  # ablation: overwrite committed mel cells

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("K must be >= 1")
        if not 0.0 < self.threshold_end <= self.threshold_start < 1.0:
            raise ValueError("need 0 < end <= start < 1")


def thresholds(cfg: RefineConfig) -> np.ndarray:
    """Linear decay from start to end over the K iterations (exact endpoints)."""
    if cfg.k == 1:
        return np.asarray([cfg.threshold_start])
    step = (cfg.threshold_start - cfg.threshold_end) / (cfg.k - 1)
    return cfg.threshold_start - step * np.arange(cfg.k)


@dataclass
class RefineTrace:
    thresholds: list = field(default_factory=list)
    iterations: list = field(default_factory=list)

    def dump_jsonl(self, path: str):
        with open(path, "w") as fh:
            for rec in self.iterations:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _stt_pass(model: Model, x: np.ndarray, e_a):
    z = model.mm_forward(x, e_a)
    logits = model.text_head(z)
    return greedy_decode(logits.data)


def refine_stt(x: np.ndarray, model: Model, cfg: RefineConfig,
               speaker: int | None = None):
    """K-pass mask-predict recognition; K=1 is exactly the plain greedy pass.

    After pass k, characters with confidence below tau_k are masked (with
    their following blank; never the leading blank) and the hypothesis
    alignment is fed back with the unmasked speech.
    """
    taus = thresholds(cfg)
    trace = RefineTrace(thresholds=taus.tolist())
    hyp = _stt_pass(model, x, model.mask_embedding_stream(x.shape[0]))
    trace.iterations.append({"iter": 1, "chars": len(hyp.char_ids), "masked": None})

    for k in range(2, cfg.k + 1):
        if not hyp.char_ids:
            break  # empty hypothesis: nothing to mask, keep the plain result
        tau = float(taus[k - 2])
        conf = char_confidences(hyp)
        try:
            align = repeats_from_path(hyp.frame_path, hyp.char_ids)
        except ValueError:
            break  # path not representable (e.g. stray blank-only runs)
        tokens = list(align.tokens)
        flags = np.zeros(len(tokens), dtype=bool)
        for i, c in enumerate(conf):
            if c < tau:
                tokens[2 * i + 1] = MASK_ID  # the character
                tokens[2 * i + 2] = MASK_ID  # its following blank
                flags[2 * i + 1] = flags[2 * i + 2] = True
        flags[0] = False
        n_masked = int(flags.sum())
        e_a, _logits, _l, _r, _c = model.duration_forward(
            tokens, speaker=speaker, repeats=align.repeats)
        hyp = _stt_pass(model, x, e_a)
        trace.iterations.append({"iter": k, "threshold": tau,
                                 "masked": n_masked, "chars": len(hyp.char_ids)})
    return hyp, trace


def refine_tts(char_ids, speaker: int | None, model: Model, cfg: RefineConfig,
               repeats=None):
    """K-pass corner-committed synthesis; K=1 is exactly the plain pass.

    The first pass fixes T (from predicted repeats unless ground-truth
    `repeats` are supplied); iteration k feeds back the canvas with only
    the leading (k-1)/K corner kept, and that corner is frozen.
    """
    tokens = add_blank(list(char_ids))
    e_a, _logits, _l, r_used, _c = model.duration_forward(
        tokens, speaker=speaker, repeats=repeats)
    t_frames = sum(r_used)
    f_bins = model.cfg.mel_bins
    trace = RefineTrace()

    def synth(x_in):
        z = model.mm_forward(x_in, e_a)
        return model.speech_head(z).data

    canvas = synth(np.zeros((t_frames, f_bins), dtype=np.float32))
    trace.iterations.append({"iter": 1, "kept_frac": 0.0, "masked_cells": t_frames * f_bins})

    for k in range(2, cfg.k + 1):
        frac = (k - 1) / cfg.k
        t0 = int(np.floor(frac * t_frames))
        f0 = int(np.floor(frac * f_bins))
        x_in = np.zeros_like(canvas)
        x_in[:t0, :f0] = canvas[:t0, :f0]
        out = synth(x_in)
        if not cfg.repredict_all:
            out[:t0, :f0] = canvas[:t0, :f0]  # committed corner is frozen
        canvas = out
        trace.iterations.append({"iter": k, "kept_frac": frac,
                                 "masked_cells": t_frames * f_bins - t0 * f0})
    return canvas, r_used, trace
