"""Joint non-autoregressive speech recognition and synthesis, desk scale."""

from .alignment import (BLANK_ID, MASK_ID, CtcAlignment, Vocabulary, add_blank,
                        collapse_path, repeats_from_path, upsample_by_repeats)
from .ctc import (Hypothesis, char_confidences, ctc_loss, ctc_loss_value,
                  greedy_decode, viterbi_align)
from .data import (Dataset, SynthConfig, edit_distance_metrics, gen_corpus,
                   load_manifest, read_features, render_utterance, write_features)
from .masking import (MaskedStream, mask_speech_corner, mask_speech_spans,
                      mask_text, propagate_blank_masks)
from .model import Model, ModelConfig, init_params, load_checkpoint, save_checkpoint
from .refine import RefineConfig, refine_stt, refine_tts, thresholds
from .tensor import Tensor, grad_check
from .training import (Adam, TrainConfig, Trainer, build_task_batch, lr_at,
                       make_pseudo_alignments, spec_augment, task_forward)

__version__ = "0.1.0"
