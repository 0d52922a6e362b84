"""Character vocabulary and frame-level alignment algebra.

An alignment is a blank-interleaved token sequence of length 2*|Y|+1 plus a
repeat count per token; repeating each token by its count yields the
frame-level path, and collapsing that path recovers the text.
"""

from __future__ import annotations

from dataclasses import dataclass

BLANK = "_"
MASK = "<mask>"
BLANK_ID = 0
MASK_ID = 1


class AlignmentError(ValueError):
    pass


class Vocabulary:
    """Ordered token set with blank fixed at index 0 and <mask> at index 1."""

    def __init__(self, characters):
        chars = list(characters)
        if BLANK in chars or MASK in chars:
            raise AlignmentError("blank and <mask> are reserved tokens")
        if len(set(chars)) != len(chars):
            raise AlignmentError("duplicate characters in vocabulary")
        self.tokens = [BLANK, MASK] + chars
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    @property
    def characters(self):
        return self.tokens[2:]

    def encode_char(self, c: str) -> int:
        try:
            return self.index[c]
        except KeyError:
            raise AlignmentError(f"out-of-vocabulary character: {c!r}") from None

    def encode(self, text: str):
        return [self.encode_char(c) for c in text]

    def decode(self, ids):
        return "".join(self.tokens[i] for i in ids)

    def save(self, path):
        with open(path, "w") as fh:
            for t in self.tokens:
                fh.write(t + "\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            tokens = [line.rstrip("\n") for line in fh if line.rstrip("\n")]
        if tokens[:2] != [BLANK, MASK]:
            raise AlignmentError("vocabulary file missing reserved tokens")
        return cls(tokens[2:])


@dataclass
class CtcAlignment:
    """Blank-interleaved token ids plus per-token repeat counts.

    Character repeats are >= 1, blank repeats >= 0, and the repeats sum to
    the frame count of the utterance the alignment describes.
    """

    tokens: list
    repeats: list

    def __post_init__(self):
        if len(self.tokens) != len(self.repeats):
            raise AlignmentError("tokens and repeats must have equal length")
        validate_repeats(self.tokens, self.repeats)

    @property
    def num_frames(self):
        return sum(self.repeats)


def validate_repeats(tokens, repeats):
    for i, (tok, r) in enumerate(zip(tokens, repeats)):
        if r < 0:
            raise AlignmentError(f"negative repeat at position {i}")
        if tok != BLANK_ID and tok != MASK_ID and r == 0:
            raise AlignmentError(f"character repeat of 0 at position {i}")
    # a zero-repeat blank between equal characters would merge them on collapse
    for i in range(2, len(tokens), 2):
        if i + 1 < len(tokens) and tokens[i - 1] == tokens[i + 1] and repeats[i] == 0:
            raise AlignmentError(
                f"blank between identical characters at position {i} must repeat >= 1")


def add_blank(char_ids):
    """Interleave blanks around every character: |out| = 2*|Y|+1."""
    out = [BLANK_ID]
    for c in char_ids:
        if c == BLANK_ID:
            raise AlignmentError("blank cannot appear inside a transcript")
        out.append(c)
        out.append(BLANK_ID)
    return out


def upsample_by_repeats(tokens, repeats):
    """Expand each token `repeats[i]` times into a frame-level sequence."""
    if len(tokens) != len(repeats):
        raise AlignmentError("tokens and repeats must have equal length")
    validate_repeats(tokens, repeats)
    out = []
    for tok, r in zip(tokens, repeats):
        out.extend([tok] * r)
    return out


def collapse_path(frame_tokens):
    """Standard CTC collapse: merge adjacent duplicates, drop blanks."""
    out = []
    prev = None
    for tok in frame_tokens:
        if tok != prev and tok != BLANK_ID:
            out.append(tok)
        prev = tok
    return out


def repeats_from_path(frame_tokens, char_ids):
    """Invert upsampling: recover per-token repeats of add_blank(Y) from a path.

    Rejects paths that do not collapse to Y. Round-trips exactly with
    upsample_by_repeats.
    """
    if collapse_path(frame_tokens) != list(char_ids):
        raise AlignmentError("frame path does not collapse to the given text")
    tokens = add_blank(char_ids)
    repeats = [0] * len(tokens)
    pos = 0  # index into the blank-interleaved token sequence
    for tok in frame_tokens:
        if tok == tokens[pos]:
            repeats[pos] += 1
        elif pos + 1 < len(tokens) and tok == tokens[pos + 1]:
            pos += 1
            repeats[pos] += 1
        elif pos + 2 < len(tokens) and tok == tokens[pos + 2]:
            pos += 2
            repeats[pos] += 1
        else:
            raise AlignmentError("frame path inconsistent with alignment skeleton")
    return CtcAlignment(tokens, repeats)
