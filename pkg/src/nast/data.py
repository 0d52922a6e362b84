"""Synthetic spectro-glyph corpus, feature/manifest IO, and error-rate metrics.

Each character renders a fixed spectral prototype for a random number of
frames, so every utterance carries an exact ground-truth alignment. Space
renders as silence. Feature matrices are stored in a small binary format
(magic + version + T + F + row-major little-endian float32).
"""

from __future__ import annotations

import json
import os
import string
from dataclasses import dataclass, field, asdict

import numpy as np

from .alignment import BLANK_ID, CtcAlignment, Vocabulary, add_blank

FEAT_MAGIC = b"NFEA"
FEAT_VERSION = 1


class DataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# feature binary format


def write_features(path: str, feats: np.ndarray) -> None:
    feats = np.asarray(feats, dtype="<f4")
    if feats.ndim != 2:
        raise DataError("features must be a (T, F) matrix")
    t, f = feats.shape
    with open(path, "wb") as fh:
        fh.write(FEAT_MAGIC)
        fh.write(FEAT_VERSION.to_bytes(4, "little"))
        fh.write(t.to_bytes(4, "little"))
        fh.write(f.to_bytes(4, "little"))
        fh.write(feats.tobytes())


def read_features(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.read(4) != FEAT_MAGIC:
            raise DataError(f"{path}: not a feature file")
        ver = int.from_bytes(fh.read(4), "little")
        if ver != FEAT_VERSION:
            raise DataError(f"{path}: unsupported feature version {ver}")
        t = int.from_bytes(fh.read(4), "little")
        f = int.from_bytes(fh.read(4), "little")
        buf = fh.read(4 * t * f)
        if len(buf) != 4 * t * f:
            raise DataError(f"{path}: truncated feature file")
        return np.frombuffer(buf, dtype="<f4").reshape(t, f).copy()


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass
class SynthConfig:
    alphabet: str = string.ascii_lowercase + " "  # space renders as silence
    mel_bins: int = 16
    proto_seed: int = 7
    d_min: int = 2
    d_max: int = 5
    sil_min: int = 2
    sil_max: int = 4
    noise_sigma: float = 0.05
    num_speakers: int = 3
    speaker_scale: float = 0.1
    n_train: int = 2000
    n_dev: int = 200
    n_test: int = 200
    n_unpaired_speech: int = 300
    n_unpaired_text: int = 300
    words_min: int = 3
    words_max: int = 8
    word_len_min: int = 2
    word_len_max: int = 6
    seed: int = 1234

    def __post_init__(self):
        if self.d_min < 1:
            raise DataError("d_min must be >= 1")
        if self.noise_sigma < 0:
            raise DataError("noise sigma must be >= 0")

    def vocabulary(self) -> Vocabulary:
        return Vocabulary(self.alphabet)

    def prototypes(self) -> np.ndarray:
        """Fixed per-character spectral prototypes, row 0..|alphabet|-1."""
        rng = np.random.default_rng(self.proto_seed)
        protos = rng.uniform(-1.0, 1.0, size=(len(self.alphabet), self.mel_bins))
        protos[self.alphabet.index(" ")] = 0.0  # space is silence
        return protos

    def speaker_offsets(self) -> np.ndarray:
        rng = np.random.default_rng(self.proto_seed + 1)
        return rng.normal(0.0, self.speaker_scale,
                          size=(self.num_speakers, self.mel_bins))

    def noise_floor_l1(self) -> float:
        """Mean |N(0, sigma)|: the L1 an oracle predictor of the clean mel attains."""
        return self.noise_sigma * np.sqrt(2.0 / np.pi)


@dataclass
class Utterance:
    uid: str
    features: np.ndarray  # (T, F)
    text: str
    speaker: int
    alignment: CtcAlignment


def render_utterance(text: str, speaker: int, cfg: SynthConfig, seed: int,
                     uid: str = "utt") -> Utterance:
    """Deterministic rendering with exact ground-truth repeats.

    Characters emit their prototype (plus speaker offset and noise) for
    d ~ U[d_min, d_max] frames; spaces emit silence for a duration drawn
    from the inter-word silence range. Blank repeats are mostly zero but
    forced to one between identical neighbouring characters.
    """
    vocab = cfg.vocabulary()
    protos = cfg.prototypes()
    offsets = cfg.speaker_offsets()
    rng = np.random.default_rng(seed)

    char_ids = vocab.encode(text)
    tokens = add_blank(char_ids)
    repeats = []
    for i, tok in enumerate(tokens):
        if tok == BLANK_ID:
            if 0 < i < len(tokens) - 1 and tokens[i - 1] == tokens[i + 1]:
                repeats.append(1)  # 1-frame gap; spaces are always longer
            elif i == 0 or i == len(tokens) - 1:
                repeats.append(int(rng.integers(0, 2)))
            else:
                repeats.append(0)
        else:
            c = vocab.tokens[tok]
            if c == " ":
                repeats.append(int(rng.integers(cfg.sil_min, cfg.sil_max + 1)))
            else:
                repeats.append(int(rng.integers(cfg.d_min, cfg.d_max + 1)))
    align = CtcAlignment(tokens, repeats)

    t_total = align.num_frames
    feats = np.zeros((t_total, cfg.mel_bins), dtype=np.float32)
    pos = 0
    for tok, r in zip(tokens, repeats):
        if r == 0:
            continue
        if tok == BLANK_ID:
            row = np.zeros(cfg.mel_bins)  # blank frames are silence
        else:
            c = vocab.tokens[tok]
            row = protos[cfg.alphabet.index(c)].copy()
            if c != " ":
                row = row + offsets[speaker]
        feats[pos:pos + r] = row
        pos += r
    if cfg.noise_sigma > 0:
        feats += rng.normal(0.0, cfg.noise_sigma, size=feats.shape).astype(np.float32)
    return Utterance(uid, feats.astype(np.float32), text, speaker, align)


def _random_text(cfg: SynthConfig, rng: np.random.Generator) -> str:
    letters = [c for c in cfg.alphabet if c != " "]
    n_words = int(rng.integers(cfg.words_min, cfg.words_max + 1))
    words = []
    for _ in range(n_words):
        n = int(rng.integers(cfg.word_len_min, cfg.word_len_max + 1))
        words.append("".join(rng.choice(letters, size=n)))
    return " ".join(words)


def gen_corpus(cfg: SynthConfig, out_dir: str) -> dict:
    """Generate disjoint splits and write manifests + feature files.

    The unpaired-speech manifest drops transcripts and the unpaired-text
    manifest drops features. Regeneration with the same config is
    byte-identical. Returns {split: manifest path}.
    """
    os.makedirs(os.path.join(out_dir, "features"), exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    splits = [
        ("train", cfg.n_train, "paired"),
        ("dev", cfg.n_dev, "paired"),
        ("test", cfg.n_test, "paired"),
        ("unpaired_speech", cfg.n_unpaired_speech, "speech"),
        ("unpaired_text", cfg.n_unpaired_text, "text"),
    ]
    paths = {}
    counter = 0
    for split, n, mode in splits:
        manifest = os.path.join(out_dir, f"{split}.jsonl")
        with open(manifest, "w") as fh:
            for _ in range(n):
                uid = f"utt{counter:06d}"
                text = _random_text(cfg, rng)
                speaker = int(rng.integers(0, cfg.num_speakers))
                if mode == "text":
                    rec = {"id": uid, "features": None, "text": text,
                           "speaker": speaker, "repeats": None}
                else:
                    utt = render_utterance(text, speaker, cfg,
                                           seed=cfg.seed + 1 + counter, uid=uid)
                    rel = os.path.join("features", uid + ".bin")
                    write_features(os.path.join(out_dir, rel), utt.features)
                    rec = {"id": uid, "features": rel, "speaker": speaker,
                           "text": None if mode == "speech" else text,
                           "repeats": None if mode == "speech" else utt.alignment.repeats}
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
                counter += 1
        paths[split] = manifest
    cfg.vocabulary().save(os.path.join(out_dir, "vocab.txt"))
    with open(os.path.join(out_dir, "synth_config.json"), "w") as fh:
        json.dump(asdict(cfg), fh, sort_keys=True, indent=1)
    return paths


# ---------------------------------------------------------------------------
# manifests


@dataclass
class Record:
    uid: str
    features_path: str | None
    text: str | None
    speaker: int
    repeats: list | None
    _root: str = ""
    _cache: object = field(default=None, repr=False)

    def features(self) -> np.ndarray:
        if self.features_path is None:
            raise DataError(f"record {self.uid} has no features")
        if self._cache is None:
            self._cache = read_features(os.path.join(self._root, self.features_path))
        return self._cache


class Dataset:
    def __init__(self, records):
        self.records = list(records)

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]


def load_manifest(path: str, expect_mel_bins: int | None = None,
                  paired: bool = False) -> Dataset:
    """Load and validate a JSON-lines manifest; features load lazily."""
    root = os.path.dirname(os.path.abspath(path))
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{lineno}: malformed record: {e}") from None
            for key in ("id", "speaker"):
                if key not in rec:
                    raise DataError(f"{path}:{lineno}: missing field '{key}'")
            if paired and not rec.get("text"):
                raise DataError(f"{path}:{lineno}: paired record missing transcript")
            if paired and not rec.get("features"):
                raise DataError(f"{path}:{lineno}: paired record missing features")
            r = Record(rec["id"], rec.get("features"), rec.get("text"),
                       int(rec["speaker"]), rec.get("repeats"), _root=root)
            if r.features_path is not None and expect_mel_bins is not None:
                feats = r.features()
                if feats.shape[1] != expect_mel_bins:
                    raise DataError(
                        f"{path}:{lineno}: feature width {feats.shape[1]} != "
                        f"expected {expect_mel_bins} in {r.features_path}")
            records.append(r)
    return Dataset(records)


def save_manifest(path: str, dataset: Dataset) -> None:
    with open(path, "w") as fh:
        for r in dataset.records:
            rec = {"id": r.uid, "features": r.features_path, "text": r.text,
                   "speaker": r.speaker, "repeats": r.repeats}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# metrics


def levenshtein(a, b) -> int:
    """Iterative DP edit distance over any sequence pair."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def edit_distance_metrics(hyp: str, ref: str, unit: str = "char") -> dict:
    """Levenshtein distance and error rate at character or word granularity.

    With an empty reference the rate is the raw insertion count.
    """
    if unit == "char":
        h, r = list(hyp), list(ref)
    elif unit == "word":
        h, r = hyp.split(), ref.split()
    else:
        raise DataError(f"unknown unit: {unit}")
    dist = levenshtein(h, r)
    rate = float(dist) if len(r) == 0 else dist / len(r)
    return {"distance": dist, "error_rate": rate}
