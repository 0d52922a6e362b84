"""CTC loss, greedy decoding, and forced alignment on a toy lattice.

The two-frame uniform example is small enough to verify by hand: with a
vocabulary {_, a} and uniform frame posteriors, the paths _a, a_, aa all
collapse to "a", so the loss is -log(3/4).
"""

import numpy as np

from nast.ctc import (char_confidences, ctc_loss_value, greedy_decode,
                      viterbi_align)

print("-- hand-checkable loss --")
logits = np.zeros((2, 2))
res = ctc_loss_value(logits, [1])
print(f"loss = {res.loss:.6f}  (-log(3/4) = {-np.log(0.75):.6f})")

print("\n-- greedy decode and confidences --")
rng = np.random.default_rng(0)
logits = rng.standard_normal((10, 4)) * 2.0
hyp = greedy_decode(logits)
print("frame path:", list(hyp.frame_path))
print("collapsed: ", hyp.char_ids)
print("confidence:", np.round(char_confidences(hyp), 3))

print("\n-- forced alignment to a fixed transcript --")
target = [1, 2]
align = viterbi_align(logits, target)
print("tokens: ", list(align.tokens))
print("repeats:", list(align.repeats))
print("frames: ", align.num_frames)

print("\n-- gradient structure --")
print("d(loss)/d(logits) row sums (should be ~0):")
print(np.round(ctc_loss_value(logits, target).grad_logits.sum(axis=1), 6))
