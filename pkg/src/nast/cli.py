"""Operator command line: data synthesis, training, decoding/synthesis with
optional refinement, evaluation, and the numeric audit.

Config files are flat key=value text; flags override config keys. Exit
codes: 0 ok, 1 usage, 2 data, 3 numeric.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import audit
from .data import DataError, SynthConfig, gen_corpus, load_manifest
from .model import (CheckpointError, Model, ModelConfig, load_checkpoint,
                    save_checkpoint)
from .refine import RefineConfig, refine_stt, refine_tts
from .tensor import ContractError, NumericError
from .training import (ALL_TASKS, Adam, TrainConfig, Trainer, evaluate_stt,
                       evaluate_tts, lr_at, make_pseudo_alignments)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


def _parse_config_file(path: str) -> dict:
    """Flat key=value lines; '#' starts a comment."""
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DataError(f"{path}:{lineno}: expected key=value")
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def _coerce(value: str, kind):
    if kind is bool:
        return value.lower() in ("1", "true", "yes")
    if kind is tuple:
        return tuple(v for v in value.split(",") if v)
    return kind(value)


def _build_dataclass(cls, file_cfg: dict, overrides: dict):
    """file config first, then CLI overrides; unknown keys are usage errors."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for src in (file_cfg, overrides):
        for k, v in src.items():
            key = k.replace("-", "_")
            if key not in fields:
                continue
            if v is None:
                continue
            ftype = type(fields[key].default) if fields[key].default is not dataclasses.MISSING else str
            kwargs[key] = _coerce(v, ftype) if isinstance(v, str) else v
    return cls(**kwargs)


def _load_model(path: str):
    model, step, rng_state, extra = load_checkpoint(path)
    return model, step, rng_state, extra


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth_data(args) -> int:
    file_cfg = _parse_config_file(args.config) if args.config else {}
    overrides = {k: getattr(args, k) for k in
                 ("seed", "n_train", "n_dev", "n_test", "n_unpaired_speech",
                  "n_unpaired_text", "mel_bins", "noise_sigma", "num_speakers")
                 if getattr(args, k) is not None}
    cfg = _build_dataclass(SynthConfig, file_cfg, overrides)
    paths = gen_corpus(cfg, args.out)
    print(json.dumps(paths, indent=1, sort_keys=True))
    return EXIT_OK


def _model_from_args(args, vocab, mel_bins):
    cfg = ModelConfig(d=args.d, heads=args.heads, mm_layers=args.mm_layers,
                      peripheral_layers=args.peripheral_layers, mel_bins=mel_bins,
                      vocab_size=len(vocab), r_max=args.r_max,
                      dropout=args.dropout_rate, num_speakers=args.num_speakers)
    return Model(cfg, vocab, seed=args.seed or 0)


def cmd_train_duration(args) -> int:
    """Bootstrap duration model on paired data; only the duration CE trains."""
    from .alignment import Vocabulary, add_blank
    from . import tensor as T

    vocab = Vocabulary.load(os.path.join(args.data, "vocab.txt"))
    paired = load_manifest(os.path.join(args.data, "train.jsonl"), paired=True)
    model = _model_from_args(args, vocab, mel_bins=_peek_mel_bins(paired))
    opt = Adam(model.params)
    rng = np.random.default_rng(args.seed or 0)
    peak = args.lr
    for step in range(args.steps):
        idx = rng.integers(0, len(paired), size=args.batch_size)
        total = None
        for i in idx:
            rec = paired[int(i)]
            tokens = add_blank(vocab.encode(rec.text))
            _e, _lg, l_dur, _r, _c = model.duration_forward(
                tokens, speaker=rec.speaker, repeats=rec.repeats, rng=rng, train=True)
            total = l_dur if total is None else T.add(total, l_dur)
        total = T.scale(total, 1.0 / len(idx))
        total.backward()
        lr = peak * min(1.0, (step + 1) / max(args.steps // 10, 1))
        opt.step(lr)
        if step % 50 == 0 or step == args.steps - 1:
            print(f"step {step} dur_loss {float(total.data):.4f}")
    save_checkpoint(args.out, model, step=args.steps)
    print(f"saved {args.out}")
    return EXIT_OK


def _peek_mel_bins(dataset) -> int:
    for rec in dataset.records:
        if rec.features_path:
            return rec.features().shape[1]
    raise DataError("no features in dataset")


def cmd_train(args) -> int:
    vocab_path = os.path.join(args.data, "vocab.txt")
    from .alignment import Vocabulary

    vocab = Vocabulary.load(vocab_path)
    paired = load_manifest(os.path.join(args.data, "train.jsonl"), paired=True)
    mel_bins = _peek_mel_bins(paired)

    def _opt(name):
        p = os.path.join(args.data, name)
        return load_manifest(p, expect_mel_bins=None) if os.path.exists(p) else None

    unpaired_speech = _opt("unpaired_speech.jsonl")
    unpaired_text = _opt("unpaired_text.jsonl")

    file_cfg = _parse_config_file(args.config) if args.config else {}
    overrides = {k: getattr(args, k) for k in
                 ("epochs", "warmup_epochs", "batch_size", "alpha", "seed",
                  "steps_per_epoch", "checkpoint_every")
                 if getattr(args, k) is not None}
    if args.tasks:
        overrides["tasks"] = tuple(args.tasks.split(","))
    if args.task_mode is not None:
        overrides["task_mode"] = args.task_mode
    cfg = _build_dataclass(TrainConfig, file_cfg, overrides)
    for t in cfg.tasks:
        if t not in ALL_TASKS:
            print(f"unknown task: {t}", file=sys.stderr)
            return EXIT_USAGE

    if args.init_from:
        model, _s, _r, _e = _load_model(args.init_from)
    else:
        model = _model_from_args(args, vocab, mel_bins)

    if "t2t" in cfg.tasks and unpaired_text is not None:
        need = any(r.repeats is None for r in unpaired_text.records)
        if need:
            if not args.duration_ckpt:
                print("t2t needs pseudo-alignments: pass --duration-ckpt",
                      file=sys.stderr)
                return EXIT_DATA
            dur_model, _s, _r, _e = _load_model(args.duration_ckpt)
            n = make_pseudo_alignments(unpaired_text, dur_model)
            print(f"pseudo-aligned {n} text-only records")

    os.makedirs(args.out, exist_ok=True)
    metrics_path = os.path.join(args.out, "metrics.jsonl")
    refine_setting = {"k": args.refine_k or 1}
    trainer = Trainer(model, cfg, paired, unpaired_speech, unpaired_text,
                      metrics_path=metrics_path, refine_setting=refine_setting)
    total = cfg.epochs * trainer.steps_per_epoch if args.steps is None else args.steps
    ckpt_stride = (cfg.checkpoint_every or 0) * trainer.steps_per_epoch
    for i in range(total):
        rec = trainer.train_step()
        if i % args.log_every == 0:
            print(f"step {rec['step']} lr {rec['lr']:.2e} L {rec['l_final']:.4f}")
        if ckpt_stride and (i + 1) % ckpt_stride == 0:
            save_checkpoint(os.path.join(args.out, f"ckpt_{i+1:07d}.nast"),
                            model, step=trainer.step_idx)
    save_checkpoint(os.path.join(args.out, "ckpt_final.nast"), model,
                    step=trainer.step_idx)
    trainer.close()
    print(f"done; metrics in {metrics_path}")
    return EXIT_OK


def cmd_decode_stt(args) -> int:
    model, _s, _r, _e = _load_model(args.ckpt)
    dataset = load_manifest(args.data)
    rcfg = RefineConfig(k=args.refine_k, threshold_start=args.threshold_start,
                        threshold_end=args.threshold_end)
    out_fh = open(args.out, "w") if args.out else sys.stdout
    trace_fh = open(args.trace, "w") if args.trace else None
    try:
        for rec in dataset.records:
            hyp, trace = refine_stt(rec.features(), model, rcfg, speaker=rec.speaker)
            text = model.vocab.decode(hyp.char_ids)
            out_fh.write(json.dumps({"id": rec.uid, "text": text},
                                    sort_keys=True) + "\n")
            if trace_fh:
                for it in trace.iterations:
                    trace_fh.write(json.dumps({"id": rec.uid, **it},
                                              sort_keys=True) + "\n")
    finally:
        if args.out:
            out_fh.close()
        if trace_fh:
            trace_fh.close()
    return EXIT_OK


def cmd_synth_tts(args) -> int:
    from .data import write_features

    model, _s, _r, _e = _load_model(args.ckpt)
    dataset = load_manifest(args.data)
    rcfg = RefineConfig(k=args.refine_k, threshold_start=args.threshold_start,
                        threshold_end=args.threshold_end)
    os.makedirs(args.out_dir, exist_ok=True)
    for rec in dataset.records:
        repeats = rec.repeats if args.teacher_durations else None
        mel, r_used, trace = refine_tts(model.vocab.encode(rec.text), rec.speaker,
                                        model, rcfg, repeats=repeats)
        write_features(os.path.join(args.out_dir, rec.uid + ".bin"), mel)
        if args.trace:
            trace.dump_jsonl(os.path.join(args.out_dir, rec.uid + ".trace.jsonl"))
    print(f"wrote {len(dataset)} mels to {args.out_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, _s, _r, _e = _load_model(args.ckpt)
    dataset = load_manifest(args.data, paired=True)
    stt = evaluate_stt(model, dataset, limit=args.limit)
    tts = evaluate_tts(model, dataset, limit=args.limit)
    table = {"cer": stt["cer"], "wer": stt["wer"], "mel_l1": tts["mel_l1"],
             "n": stt["n"]}
    print(json.dumps(table, indent=1, sort_keys=True))
    return EXIT_OK


def cmd_grad_audit(args) -> int:
    worst = audit.run_audit(seeds=range(args.seeds), verbose=args.verbose)
    bad = False
    for name in sorted(worst):
        status = "ok" if worst[name] < args.tol else "FAIL"
        if status == "FAIL":
            bad = True
        print(f"{name:24s} max rel err {worst[name]:.3e}  {status}")
    return EXIT_NUMERIC if bad else EXIT_OK


# ---------------------------------------------------------------------------
# argument wiring


def _add_model_flags(p):
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--mm-layers", type=int, default=4)
    p.add_argument("--peripheral-layers", type=int, default=2)
    p.add_argument("--r-max", type=int, default=32)
    p.add_argument("--dropout-rate", type=float, default=0.1)
    p.add_argument("--num-speakers", type=int, default=3)


def _add_refine_flags(p):
    p.add_argument("--refine-k", type=int, default=1,
                   help="refinement passes; 1 = plain single pass")
    p.add_argument("--threshold-start", type=float, default=0.99)
    p.add_argument("--threshold-end", type=float, default=0.90)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nast")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate the synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    for k in ("n-train", "n-dev", "n-test", "n-unpaired-speech", "n-unpaired-text",
              "mel-bins", "num-speakers"):
        p.add_argument(f"--{k}", type=int, dest=k.replace("-", "_"))
    p.add_argument("--noise-sigma", type=float, dest="noise_sigma")
    p.set_defaults(fn=cmd_synth_data)

    p = sub.add_parser("train-duration", help="bootstrap duration model on paired data")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    _add_model_flags(p)
    p.set_defaults(fn=cmd_train_duration)

    p = sub.add_parser("train", help="joint six-task training")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--tasks", help="comma list, e.g. stt,tts (ablation rows)")
    p.add_argument("--task-mode", choices=("sum", "interleave"), dest="task_mode",
                   help="sum all task losses per step, or round-robin one task per step")
    p.add_argument("--epochs", type=int)
    p.add_argument("--warmup-epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int, help="hard cap on total steps")
    p.add_argument("--steps-per-epoch", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--log-every", type=int, default=25)
    p.add_argument("--init-from")
    p.add_argument("--duration-ckpt", help="bootstrap model for pseudo-alignments")
    _add_refine_flags(p)
    _add_model_flags(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("decode-stt", help="greedy recognition with optional refinement")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.add_argument("--trace", help="dump per-iteration refinement records")
    _add_refine_flags(p)
    p.set_defaults(fn=cmd_decode_stt)

    p = sub.add_parser("synth-tts", help="mel synthesis with optional refinement")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--teacher-durations", action="store_true")
    p.add_argument("--trace", action="store_true")
    _add_refine_flags(p)
    p.set_defaults(fn=cmd_synth_tts)

    p = sub.add_parser("eval", help="CER/WER and mel-L1 on a paired manifest")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--limit", type=int)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("grad-audit", help="finite-difference gradient audit")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(fn=cmd_grad_audit)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    try:
        return args.fn(args)
    except (DataError, CheckpointError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ContractError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
