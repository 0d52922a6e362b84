"""Walk through the alignment algebra and the three masking schedules.

An utterance's transcript, its blank-interleaved token sequence, a frame
path, and the repeat counts are four views of the same object. This script
converts between them and then shows how each masking schedule perturbs a
stream.
"""

import numpy as np

from nast.alignment import (Vocabulary, add_blank, collapse_path,
                            repeats_from_path, upsample_by_repeats)
from nast.masking import (mask_speech_corner, mask_speech_spans, mask_text,
                          propagate_blank_masks, span_coverage_expectation)

vocab = Vocabulary("CAT")
char_ids = vocab.encode("CAT")
tokens = add_blank(char_ids)
print("transcript:   CAT")
print("interleaved: ", vocab.decode(tokens))

repeats = [1, 2, 0, 1, 1, 1, 1]
path = upsample_by_repeats(tokens, repeats)
print("frame path:  ", vocab.decode(path), f"({len(path)} frames)")
print("collapsed:   ", vocab.decode(collapse_path(path)))

align = repeats_from_path(path, char_ids)
print("recovered repeats:", list(align.repeats))

print("\n-- text masking --")
masked, flags = mask_text(char_ids, p=0.34, seed=3)
inter, _ = propagate_blank_masks(add_blank(masked))
print("masked chars:     ", vocab.decode(masked))
print("with blank spread:", vocab.decode(inter))
print("as frame path:    ", vocab.decode(upsample_by_repeats(inter, repeats)))

print("\n-- span masking over speech frames --")
x = np.ones((100, 4), dtype=np.float32)
ms = mask_speech_spans(x, p=0.0625, m=10, seed=0)
print(f"masked {ms.flags.sum()} of 100 frames "
      f"(expected {span_coverage_expectation(100, 0.0625, 10):.1f})")

print("\n-- corner masking over the time/frequency plane --")
grid = np.arange(40, dtype=np.float32).reshape(8, 5)
mc = mask_speech_corner(grid, p=0.5)
print(mc.payload)
