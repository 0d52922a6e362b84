"""End-to-end miniature: synthesize a corpus, train jointly, decode, refine.

Uses a small model, a four-task recipe (recognition, synthesis, speech
denoising, and masked-text reconstruction -- the pathway iterative
refinement exercises), and round-robin task interleaving so the whole
script runs in a few minutes on a laptop CPU. For the full six-task
pipeline with pseudo-aligned unpaired text and ablations, use the `nast`
command line (see README.md).
"""

import tempfile

import numpy as np

from nast.data import SynthConfig, gen_corpus, levenshtein, load_manifest
from nast.model import Model, ModelConfig
from nast.refine import RefineConfig, refine_stt, refine_tts
from nast.training import (TrainConfig, Trainer, evaluate_stt, evaluate_tts)

root = tempfile.mkdtemp(prefix="nast_demo_")
synth = SynthConfig(n_train=200, n_dev=20, n_test=20,
                    n_unpaired_speech=20, n_unpaired_text=20)
paths = gen_corpus(synth, root)
vocab = synth.vocabulary()
paired = load_manifest(paths["train"], paired=True)
dev = load_manifest(paths["dev"], paired=True)
speech = load_manifest(paths["unpaired_speech"], paired=False)

mcfg = ModelConfig(d=64, heads=2, mm_layers=2, peripheral_layers=1,
                   mel_bins=synth.mel_bins, vocab_size=len(vocab),
                   num_speakers=synth.num_speakers)
model = Model(mcfg, vocab, seed=0)

tcfg = TrainConfig(epochs=18, warmup_epochs=5, batch_size=4, seed=0,
                   steps_per_epoch=200, task_mode="interleave",
                   tasks=("stt", "tts", "s2s", "st2t"))
trainer = Trainer(model, tcfg, paired, unpaired_speech=speech)
for i in range(3600):
    rec = trainer.train_step()
    if (i + 1) % 600 == 0:
        stt = evaluate_stt(model, dev, limit=10)
        tts = evaluate_tts(model, dev, limit=10)
        print(f"step {i+1:4d}  loss {rec['l_final']:7.2f}  "
              f"dev CER {stt['cer']:5.1f}%  mel-L1 {tts['mel_l1']:.3f}")

print("\n-- final metrics --")
print("recognition:", evaluate_stt(model, dev, limit=20))
print("synthesis:  ", evaluate_tts(model, dev, limit=20))
print("noise floor:", round(synth.noise_floor_l1(), 4))

print("\n-- iterative refinement (dev CER, clean vs extra-noisy input) --")
rng = np.random.default_rng(3)
noisy = [r.features() + 0.25 * rng.standard_normal(
            r.features().shape).astype(np.float32) for r in dev.records]
for k in (1, 2, 4):
    line = [f"K={k}:"]
    for tag, feats in (("clean", [r.features() for r in dev.records]),
                       ("noisy", noisy)):
        dist = length = 0
        for f, r in zip(feats, dev.records):
            hyp, _ = refine_stt(f, model, RefineConfig(k=k), speaker=r.speaker)
            dist += levenshtein(list(vocab.decode(hyp.char_ids)), list(r.text))
            length += len(r.text)
        line.append(f"{tag} CER {100 * dist / length:5.2f}%")
    print("  ".join(line))

rec = dev[0]
mel, r_used, trace = refine_tts(vocab.encode(rec.text), rec.speaker, model,
                                RefineConfig(k=4), repeats=rec.repeats)
err = np.abs(mel - rec.features()).mean()
print(f"\nrefined synthesis (K=4) mel-L1 vs ground truth: {err:.4f}")
