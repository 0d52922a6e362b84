"""Six-task joint training: batch recipes, loss composition, OneCycle
learning-rate schedule, Adam updates, SpecAugment, and pseudo-alignments.

Each step builds one batch per active task, sums the per-task losses into a
single scalar, and takes one optimizer update. Everything is deterministic
given (config, seed).
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .alignment import add_blank
from .ctc import ctc_loss, greedy_decode, viterbi_align
from .data import Dataset, Record, edit_distance_metrics
from .masking import mask_speech_corner, mask_speech_spans, mask_text, propagate_blank_masks
from .model import Model, ModelConfig
from .tensor import Tensor

ALL_TASKS = ("stt", "tts", "t2t", "s2s", "st2t", "st2s")
P_CHOICES = (0.1, 0.25, 0.5, 0.75, 0.9)

# which source each task draws from and which head it trains
TASK_SOURCES = {
    "stt": "paired", "tts": "paired", "st2t": "paired", "st2s": "paired",
    "t2t": "text", "s2s": "speech",
}
TASK_HEADS = {
    "stt": "text", "t2t": "text", "st2t": "text",
    "tts": "speech", "s2s": "speech", "st2s": "speech",
}


@dataclass
class TrainConfig:
    epochs: int = 100
    warmup_epochs: int = 30
    batch_size: int = 32
    base_lr: float = 5e-4
    start_div: float = 25.0
    final_div: float = 1e4
    alpha: float = 1.0  # duration-loss weight
    seed: int = 0
    tasks: tuple = ALL_TASKS
    task_mode: str = "sum"  # "sum": all tasks per step; "interleave": round-robin
    steps_per_epoch: int = 0  # 0: derived from the paired split
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-9
    grad_clip: float = 5.0
    spec_augment_time_masks: int = 2
    spec_augment_time_width: int = 20
    spec_augment_freq_masks: int = 2
    spec_augment_freq_width: int = 10
    checkpoint_every: int = 0  # epochs; 0 disables

    @property
    def peak_lr(self) -> float:
        return self.base_lr * np.sqrt(self.batch_size / 32.0)


def lr_at(step: int, cfg: TrainConfig, total_steps: int) -> float:
    """OneCycle: linear ramp peak/25 -> peak over the warmup span, then
    linear anneal to peak/1e4 at the end of training."""
    if step < 0:
        raise T.ContractError("step must be >= 0")
    peak = cfg.peak_lr
    start = peak / cfg.start_div
    final = peak / cfg.final_div
    warmup = int(round(total_steps * cfg.warmup_epochs / cfg.epochs))
    if step <= warmup:
        if warmup == 0:
            return peak
        return start + (peak - start) * step / warmup
    if step >= total_steps:
        return final
    return peak + (final - peak) * (step - warmup) / (total_steps - warmup)


def spec_augment(x: np.ndarray, rng: np.random.Generator, n_t=2, w_t=20,
                 n_f=2, w_f=10) -> np.ndarray:
    """Zero out n_t time stripes (width <= w_t) and n_f frequency stripes
    (width <= w_f). Used only for the supervised recognition task."""
    out = np.asarray(x).copy()
    t, f = out.shape
    for _ in range(n_t):
        w = int(rng.integers(0, w_t + 1))
        if w and t:
            s = int(rng.integers(0, max(t - w, 0) + 1))
            out[s:s + w, :] = 0.0
    for _ in range(n_f):
        w = int(rng.integers(0, w_f + 1))
        if w and f:
            s = int(rng.integers(0, max(f - w, 0) + 1))
            out[:, s:s + w] = 0.0
    return out


@dataclass
class TaskExample:
    """One fully masked/assembled training example for a task."""

    kind: str
    x_in: np.ndarray  # (T, F) masked speech input
    text_mode: str  # "absent" | "present"
    tokens: list | None  # blank-interleaved (possibly masked) token ids
    repeats: list | None
    dur_loss_mask: np.ndarray | None
    include_dur_loss: bool
    speaker: int
    head: str
    target_text: list | None
    target_mel: np.ndarray | None
    flags: dict = field(default_factory=dict)


class MissingRepeats(ValueError):
    pass


def _record_repeats(rec: Record, vocab, model: Model | None, counters: dict):
    """Ground-truth repeats, or a Viterbi forced alignment from the current
    model when a paired record lacks them."""
    if rec.repeats is not None:
        return list(rec.repeats)
    if model is None:
        raise MissingRepeats(f"record {rec.uid} lacks repeats and no model was given")
    counters["viterbi_fallback"] = counters.get("viterbi_fallback", 0) + 1
    x = rec.features()
    char_ids = vocab.encode(rec.text)
    e_a = model.mask_embedding_stream(x.shape[0])
    z = model.mm_forward(x, e_a)
    logits = model.text_head(z)
    return viterbi_align(logits.data, char_ids).repeats


def build_task_example(kind: str, rec: Record, vocab, rng: np.random.Generator,
                       cfg: TrainConfig, model: Model | None = None,
                       counters: dict | None = None, train: bool = True) -> TaskExample:
    """Apply the task's masking recipe to one record."""
    counters = counters if counters is not None else {}
    head = TASK_HEADS[kind]
    char_ids = vocab.encode(rec.text) if rec.text is not None else None

    if kind == "stt":
        x = rec.features()
        if train:
            x = spec_augment(x, rng, cfg.spec_augment_time_masks,
                             cfg.spec_augment_time_width,
                             cfg.spec_augment_freq_masks,
                             cfg.spec_augment_freq_width)
        return TaskExample(kind, x, "absent", None, None, None, False,
                           rec.speaker, head, char_ids, None,
                           flags={"p_y": 1.0, "p_x": 0.0})

    if kind == "s2s":
        x = rec.features()
        stream = mask_speech_spans(x, 0.0625, 10, rng)
        return TaskExample(kind, stream.payload, "absent", None, None, None, False,
                           rec.speaker, head, None, x,
                           flags={"p_y": 1.0, "p_x": 0.0625, "M": 10})

    repeats = _record_repeats(rec, vocab, model, counters)
    tokens = add_blank(char_ids)
    t_frames = sum(repeats)

    if kind == "tts":
        x_in = np.zeros((t_frames, rec.features().shape[1]), dtype=np.float32)
        return TaskExample(kind, x_in, "present", tokens, repeats, None, True,
                           rec.speaker, head, None, rec.features(),
                           flags={"p_y": 0.0, "p_x": 1.0})

    if kind == "t2t":
        if model is None:
            raise T.ContractError("t2t batches need the model config for mel width")
        masked_chars, _ = mask_text(char_ids, 0.25, rng)
        mtokens, tflags = propagate_blank_masks(add_blank(masked_chars))
        x_in = np.zeros((t_frames, model.cfg.mel_bins), dtype=np.float32)
        return TaskExample(kind, x_in, "present", mtokens, repeats, ~tflags, False,
                           rec.speaker, head, char_ids, None,
                           flags={"p_y": 0.25, "p_x": 1.0})

    if kind == "st2t":
        p_y = float(rng.choice(P_CHOICES))
        masked_chars, _ = mask_text(char_ids, p_y, rng)
        mtokens, tflags = propagate_blank_masks(add_blank(masked_chars))
        return TaskExample(kind, rec.features(), "present", mtokens, repeats,
                           ~tflags, False, rec.speaker, head, char_ids, None,
                           flags={"p_y": p_y, "p_x": 0.0})

    if kind == "st2s":
        p_x = float(rng.choice(P_CHOICES))
        stream = mask_speech_corner(rec.features(), p_x, rng)
        return TaskExample(kind, stream.payload, "present", tokens, repeats,
                           None, True, rec.speaker, head, None, rec.features(),
                           flags={"p_y": 0.0, "p_x": p_x})

    raise T.ContractError(f"unknown task kind: {kind}")


def build_task_batch(kind: str, dataset: Dataset, indices, vocab,
                     rng: np.random.Generator, cfg: TrainConfig,
                     model: Model | None = None, counters: dict | None = None,
                     train: bool = True):
    return [build_task_example(kind, dataset[i], vocab, rng, cfg, model,
                               counters, train) for i in indices]


def task_forward(model: Model, ex: TaskExample, rng=None, train: bool = True,
                 alpha: float = 1.0):
    """Forward one example through the task's graph; returns (loss, parts)."""
    t_frames = ex.x_in.shape[0]
    l_dur = None
    if ex.text_mode == "absent":
        e_a = model.mask_embedding_stream(t_frames)
    else:
        e_a, _r_logits, l_dur, _r, _clamped = model.duration_forward(
            ex.tokens, speaker=ex.speaker, repeats=ex.repeats,
            loss_mask=ex.dur_loss_mask, rng=rng, train=train)
    z = model.mm_forward(ex.x_in, e_a, rng=rng, train=train)
    if ex.head == "text":
        logits = model.text_head(z, rng, train)
        main = ctc_loss(logits, ex.target_text)
    else:
        pred = model.speech_head(z, rng, train)
        main = T.l1_loss(pred, Tensor(ex.target_mel.astype(model.dtype)))
    loss = main
    parts = {"main": float(main.data)}
    if ex.include_dur_loss:
        loss = T.add(loss, T.scale(l_dur, alpha))
        parts["dur"] = float(l_dur.data)
    return loss, parts


def make_pseudo_alignments(dataset: Dataset, model: Model) -> int:
    """Fill missing repeats on text-only records from the duration predictor.

    Returns the number of records updated.
    """
    n = 0
    for rec in dataset.records:
        if rec.repeats is not None or rec.text is None:
            continue
        tokens = add_blank(model.vocab.encode(rec.text))
        _e_a, _logits, _l, r_used, _c = model.duration_forward(
            tokens, speaker=rec.speaker, repeats=None)
        rec.repeats = r_used
        n += 1
    return n


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam with bias correction and global-norm gradient clipping."""

    def __init__(self, params: dict, beta1=0.9, beta2=0.98, eps=1e-9, clip=5.0):
        self.params = params
        self.beta1, self.beta2, self.eps, self.clip = beta1, beta2, eps, clip
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, lr: float) -> float:
        """Apply one update from accumulated grads; returns the pre-clip norm."""
        self.t += 1
        sq = 0.0
        for p in self.params.values():
            if p.grad is not None:
                flat = p.grad.ravel()
                sq += float(np.dot(flat, flat))
        norm = float(np.sqrt(sq))
        factor = 1.0 if norm <= self.clip or norm == 0.0 else self.clip / norm
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if factor != 1.0:
                g = g * factor
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * np.square(g)
            denom = np.sqrt(v / c2)
            denom += self.eps
            step = m / denom
            step *= lr / c1
            p.data -= step
            p.grad = None
        return norm


# ---------------------------------------------------------------------------
# training loop


class Trainer:
    def __init__(self, model: Model, cfg: TrainConfig, paired: Dataset,
                 unpaired_speech: Dataset | None = None,
                 unpaired_text: Dataset | None = None,
                 metrics_path: str | None = None,
                 refine_setting: dict | None = None):
        if cfg.task_mode not in ("sum", "interleave"):
            raise T.ContractError(f"unknown task_mode: {cfg.task_mode!r}")
        self.model = model
        self.cfg = cfg
        self.sources = {"paired": paired, "speech": unpaired_speech, "text": unpaired_text}
        self.rng = np.random.default_rng(cfg.seed)
        self.opt = Adam(model.params, cfg.adam_beta1, cfg.adam_beta2,
                        cfg.adam_eps, cfg.grad_clip)
        self.step_idx = 0
        self.counters: dict = {}
        self.metrics_fh = None
        # tasks with an absent data source are skipped, with a logged flag
        self.active_tasks, self.skipped_tasks = [], []
        for k in cfg.tasks:
            src = self.sources[TASK_SOURCES[k]]
            if src is None and TASK_SOURCES[k] != "paired":
                src = paired  # LJSpeech-style reuse of the paired split
                self.sources[TASK_SOURCES[k]] = paired
            if src is None or len(src) == 0:
                self.skipped_tasks.append(k)
            else:
                self.active_tasks.append(k)
        steps = cfg.steps_per_epoch or max(1, int(np.ceil(len(paired) / cfg.batch_size)))
        self.steps_per_epoch = steps
        self.total_steps = steps * cfg.epochs
        if metrics_path:
            self.metrics_fh = open(metrics_path, "w")
            header = {
                "type": "header",
                "config": asdict(cfg),
                "model": asdict(model.cfg),
                "tasks": list(self.active_tasks),
                "skipped_tasks": list(self.skipped_tasks),
                "refine": refine_setting or {"k": 1},
            }
            self.metrics_fh.write(json.dumps(header, sort_keys=True) + "\n")
            self.metrics_fh.flush()

    def close(self):
        if self.metrics_fh:
            self.metrics_fh.close()
            self.metrics_fh = None

    def train_step(self) -> dict:
        """One joint step and one Adam update. In "sum" mode every active task
        contributes one batch and the losses are summed before the single
        backward; in "interleave" mode the step trains one batch of a single
        task, cycling through the active tasks round-robin."""
        t0 = time.time()
        per_task = {}
        total = None
        if self.cfg.task_mode == "interleave" and self.active_tasks:
            step_tasks = [self.active_tasks[self.step_idx % len(self.active_tasks)]]
        else:
            step_tasks = self.active_tasks
        for kind in step_tasks:
            ds = self.sources[TASK_SOURCES[kind]]
            idx = self.rng.integers(0, len(ds), size=self.cfg.batch_size)
            batch = build_task_batch(kind, ds, idx, self.model.vocab, self.rng,
                                     self.cfg, self.model, self.counters)
            task_loss = None
            for ex in batch:
                loss, _parts = task_forward(self.model, ex, rng=self.rng,
                                            train=True, alpha=self.cfg.alpha)
                task_loss = loss if task_loss is None else T.add(task_loss, loss)
            task_loss = T.scale(task_loss, 1.0 / len(batch))
            per_task[kind] = float(task_loss.data)
            total = task_loss if total is None else T.add(total, task_loss)
        if total is None:
            raise T.ContractError("no active tasks with data")
        if not np.isfinite(total.data):
            bad = max(per_task, key=lambda k: abs(per_task[k]))
            raise T.NumericError(f"non-finite loss; worst task: {bad}")
        total.backward()
        lr = lr_at(self.step_idx, self.cfg, self.total_steps)
        self.opt.step(lr)
        rec = {
            "type": "step", "step": self.step_idx, "lr": lr,
            "loss": dict(per_task),
            "l_final": float(sum(per_task.values())),
            "wall_time": time.time() - t0,
        }
        if self.metrics_fh:
            self.metrics_fh.write(json.dumps(rec, sort_keys=True) + "\n")
            self.metrics_fh.flush()
        self.step_idx += 1
        return rec

    def train(self, steps: int):
        out = []
        for _ in range(steps):
            out.append(self.train_step())
        return out


# ---------------------------------------------------------------------------
# evaluation


def decode_record(model: Model, rec: Record):
    """Single-pass greedy recognition of one record."""
    x = rec.features()
    e_a = model.mask_embedding_stream(x.shape[0])
    z = model.mm_forward(x, e_a)
    logits = model.text_head(z)
    return greedy_decode(logits.data), logits.data


def evaluate_stt(model: Model, dataset: Dataset, limit: int | None = None) -> dict:
    """Greedy character/word error rates over a dataset (percent)."""
    cer_n, cer_d, wer_n, wer_d = 0, 0, 0, 0
    recs = dataset.records[:limit] if limit else dataset.records
    for rec in recs:
        hyp, _ = decode_record(model, rec)
        text = model.vocab.decode(hyp.char_ids)
        cm = edit_distance_metrics(text, rec.text, "char")
        wm = edit_distance_metrics(text, rec.text, "word")
        cer_n += cm["distance"]
        cer_d += len(rec.text)
        wer_n += wm["distance"]
        wer_d += len(rec.text.split())
    return {"cer": 100.0 * cer_n / max(cer_d, 1),
            "wer": 100.0 * wer_n / max(wer_d, 1), "n": len(recs)}


def synthesize_record(model: Model, rec: Record, teacher_durations: bool = True):
    """Single-pass synthesis; returns (mel, repeats used). With teacher
    durations the output length equals the reference, which makes mel-L1
    well defined."""
    tokens = add_blank(model.vocab.encode(rec.text))
    repeats = list(rec.repeats) if teacher_durations and rec.repeats else None
    e_a, _logits, _l, r_used, _c = model.duration_forward(
        tokens, speaker=rec.speaker, repeats=repeats)
    t_frames = sum(r_used)
    x_in = np.zeros((t_frames, model.cfg.mel_bins), dtype=np.float32)
    z = model.mm_forward(x_in, e_a)
    return model.speech_head(z).data, r_used


def evaluate_tts(model: Model, dataset: Dataset, limit: int | None = None) -> dict:
    """Teacher-duration mel-L1 (mean absolute error) over a dataset."""
    tot, n = 0.0, 0
    recs = dataset.records[:limit] if limit else dataset.records
    for rec in recs:
        mel, _r = synthesize_record(model, rec, teacher_durations=True)
        ref = rec.features()
        tot += float(np.abs(mel - ref).mean())
        n += 1
    return {"mel_l1": tot / max(n, 1), "n": n}
