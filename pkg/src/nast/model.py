"""Model architecture: text encoder + duration predictor, multimodal encoder,
and the two task heads, all built from conformer blocks.

Residual branches carry a learnable scale initialized at 0.1 so every block
starts near the identity; there is no per-block output norm (a single norm
sits after the multimodal stack).
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .alignment import BLANK_ID, MASK_ID, Vocabulary
from .tensor import Tensor

CKPT_MAGIC = b"NASTCKP1"


@dataclass
class ModelConfig:
    d: int = 64
    heads: int = 2
    mm_layers: int = 4
    peripheral_layers: int = 2
    mel_bins: int = 16
    vocab_size: int = 29
    r_max: int = 32
    conv_kernel: int = 7
    dropout: float = 0.1
    num_speakers: int = 3
    ff_mult: int = 4

    def __post_init__(self):
        if self.d % self.heads != 0:
            raise T.ContractError("hidden width must be divisible by head count")
        if self.conv_kernel % 2 != 1:
            raise T.ContractError("conv kernel must be odd")


def vocab_hash(vocab: Vocabulary) -> str:
    return hashlib.sha256("\n".join(vocab.tokens).encode()).hexdigest()


def _block_param_names(cfg: ModelConfig, prefix: str):
    d, k, m = cfg.d, cfg.conv_kernel, cfg.ff_mult
    names = []
    for ff in ("ff1", "ff2"):
        names += [
            (f"{prefix}.{ff}.ln.g", (d,), "ones"),
            (f"{prefix}.{ff}.ln.b", (d,), "zeros"),
            (f"{prefix}.{ff}.w1", (d, m * d), "fan"),
            (f"{prefix}.{ff}.b1", (m * d,), "zeros"),
            (f"{prefix}.{ff}.w2", (m * d, d), "fan"),
            (f"{prefix}.{ff}.b2", (d,), "zeros"),
            (f"{prefix}.{ff}.s", (), "scale"),
        ]
    names += [
        (f"{prefix}.attn.ln.g", (d,), "ones"),
        (f"{prefix}.attn.ln.b", (d,), "zeros"),
        (f"{prefix}.attn.wq", (d, d), "fan"),
        (f"{prefix}.attn.bq", (d,), "zeros"),
        (f"{prefix}.attn.wk", (d, d), "fan"),
        (f"{prefix}.attn.wv", (d, d), "fan"),
        (f"{prefix}.attn.bv", (d,), "zeros"),
        (f"{prefix}.attn.wo", (d, d), "fan"),
        (f"{prefix}.attn.bo", (d,), "zeros"),
        (f"{prefix}.attn.s", (), "scale"),
        (f"{prefix}.conv.ln.g", (d,), "ones"),
        (f"{prefix}.conv.ln.b", (d,), "zeros"),
        (f"{prefix}.conv.win", (d, 2 * d), "fan"),
        (f"{prefix}.conv.bin", (2 * d,), "zeros"),
        (f"{prefix}.conv.dw", (k, d), "fan"),
        (f"{prefix}.conv.nrm.g", (d,), "ones"),
        (f"{prefix}.conv.nrm.b", (d,), "zeros"),
        (f"{prefix}.conv.wout", (d, d), "fan"),
        (f"{prefix}.conv.bout", (d,), "zeros"),
        (f"{prefix}.conv.s", (), "scale"),
    ]
    return names


def _param_manifest(cfg: ModelConfig):
    d, f, v = cfg.d, cfg.mel_bins, cfg.vocab_size
    names = [
        ("embed.tok", (v, d), "embed"),
        ("embed.spk", (cfg.num_speakers, d), "embed"),
        ("proj_x.w", (f, d), "fan"),
        ("proj_x.b", (d,), "bias_small"),
        ("proj_x.ln.g", (d,), "ones"),
        ("proj_x.ln.b", (d,), "zeros"),
        ("proj_y.w", (d, d), "fan"),
        ("proj_y.b", (d,), "bias_small"),
        ("proj_y.ln.g", (d,), "ones"),
        ("proj_y.ln.b", (d,), "zeros"),
    ]
    for i in range(cfg.peripheral_layers):
        names += _block_param_names(cfg, f"textenc.{i}")
    for i in range(cfg.peripheral_layers):
        names += _block_param_names(cfg, f"durpred.{i}")
    names += [
        ("durpred.out.w", (d, cfg.r_max + 1), "fan"),
        ("durpred.out.b", (cfg.r_max + 1,), "zeros"),
    ]
    for i in range(cfg.mm_layers):
        names += _block_param_names(cfg, f"mm.{i}")
    names += [("mm.ln.g", (d,), "ones"), ("mm.ln.b", (d,), "zeros")]
    for i in range(cfg.peripheral_layers):
        names += _block_param_names(cfg, f"speechhead.{i}")
    for i in range(cfg.peripheral_layers):
        names += _block_param_names(cfg, f"texthead.{i}")
    names += [
        ("out_x.w", (d, f), "fan"),
        ("out_x.b", (f,), "zeros"),
        ("out_y.w", (d, v), "fan"),
        ("out_y.b", (v,), "zeros"),
    ]
    return names


def init_params(cfg: ModelConfig, seed: int, dtype=np.float32) -> dict:
    """Deterministic parameter dict; same seed gives bit-identical states."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape, kind in _param_manifest(cfg):
        if kind == "zeros":
            data = np.zeros(shape, dtype=dtype)
        elif kind == "ones":
            data = np.ones(shape, dtype=dtype)
        elif kind == "scale":
            data = np.asarray(0.1, dtype=dtype)
        elif kind == "bias_small":
            # keeps the post-projection layer norm off its zero-variance point
            # when a modality is absent (all-zero input)
            data = (rng.standard_normal(shape) * 0.05).astype(dtype)
        elif kind == "embed":
            data = (rng.standard_normal(shape) * (1.0 / np.sqrt(cfg.d))).astype(dtype)
        else:  # fan-in scaled normal
            fan = shape[0] if len(shape) > 1 else shape[0]
            data = (rng.standard_normal(shape) * (1.0 / np.sqrt(fan))).astype(dtype)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


_POS_CACHE: dict = {}


def positional_encoding(n: int, d: int, dtype) -> np.ndarray:
    key = (n, d, np.dtype(dtype).name)
    if key not in _POS_CACHE:
        pos = np.arange(n)[:, None]
        dim = np.arange(d // 2)[None, :]
        angle = pos / np.power(10000.0, 2.0 * dim / d)
        pe = np.zeros((n, d))
        pe[:, 0::2] = np.sin(angle)
        pe[:, 1::2] = np.cos(angle)
        _POS_CACHE[key] = pe.astype(dtype)
    return _POS_CACHE[key]


class Model:
    """Bundles config, vocabulary, and the parameter dict; exposes the
    forward passes each task composes."""

    def __init__(self, cfg: ModelConfig, vocab: Vocabulary, params: dict | None = None,
                 seed: int = 0, dtype=np.float32):
        if len(vocab) != cfg.vocab_size:
            raise T.ContractError(
                f"config vocab_size {cfg.vocab_size} != vocabulary size {len(vocab)}")
        self.cfg = cfg
        self.vocab = vocab
        self.dtype = np.dtype(dtype)
        self.params = params if params is not None else init_params(cfg, seed, dtype)

    def p(self, name: str) -> Tensor:
        return self.params[name]

    # -- building blocks ----------------------------------------------------

    def _linear(self, x, wname, bname):
        return T.add(T.matmul(x, self.p(wname)), self.p(bname))

    def _ln(self, x, prefix):
        return T.layer_norm(x, self.p(prefix + ".g"), self.p(prefix + ".b"))

    def _ffn(self, x, prefix, rng, train):
        h = self._ln(x, prefix + ".ln")
        h = T.swish(self._linear(h, prefix + ".w1", prefix + ".b1"))
        h = T.dropout(h, self.cfg.dropout, rng, train)
        h = self._linear(h, prefix + ".w2", prefix + ".b2")
        h = T.dropout(h, self.cfg.dropout, rng, train)
        return T.mul(h, self.p(prefix + ".s"))

    def _attention(self, x, prefix, rng, train):
        d, nh = self.cfg.d, self.cfg.heads
        dh = d // nh
        h = self._ln(x, prefix + ".ln")
        q = self._linear(h, prefix + ".wq", prefix + ".bq")
        # no key bias: it cancels exactly through the softmax
        k = T.matmul(h, self.p(prefix + ".wk"))
        v = self._linear(h, prefix + ".wv", prefix + ".bv")
        outs = []
        for i in range(nh):
            lo, hi = i * dh, (i + 1) * dh
            qi = T.slice_cols(q, lo, hi)
            ki = T.slice_cols(k, lo, hi)
            vi = T.slice_cols(v, lo, hi)
            scores = T.scale(T.matmul(qi, T.transpose(ki)), 1.0 / np.sqrt(dh))
            attn = T.softmax(scores)
            attn = T.dropout(attn, self.cfg.dropout, rng, train)
            outs.append(T.matmul(attn, vi))
        o = outs[0] if nh == 1 else T.concat_cols(outs)
        o = self._linear(o, prefix + ".wo", prefix + ".bo")
        o = T.dropout(o, self.cfg.dropout, rng, train)
        return T.mul(o, self.p(prefix + ".s"))

    def _conv_module(self, x, prefix, rng, train):
        h = self._ln(x, prefix + ".ln")
        h = T.glu(self._linear(h, prefix + ".win", prefix + ".bin"))
        h = T.depthwise_conv1d(h, self.p(prefix + ".dw"))
        h = self._ln(h, prefix + ".nrm")
        h = T.swish(h)
        h = self._linear(h, prefix + ".wout", prefix + ".bout")
        h = T.dropout(h, self.cfg.dropout, rng, train)
        return T.mul(h, self.p(prefix + ".s"))

    def conformer_block(self, x: Tensor, prefix: str, rng=None, train=False) -> Tensor:
        if rng is None:
            rng = np.random.default_rng(0)
        x = T.add(x, T.scale(self._ffn(x, prefix + ".ff1", rng, train), 0.5))
        x = T.add(x, self._attention(x, prefix + ".attn", rng, train))
        x = T.add(x, self._conv_module(x, prefix + ".conv", rng, train))
        x = T.add(x, T.scale(self._ffn(x, prefix + ".ff2", rng, train), 0.5))
        return x

    def _stack(self, x, prefix, n, rng, train):
        for i in range(n):
            x = self.conformer_block(x, f"{prefix}.{i}", rng, train)
        return x

    # -- duration model -----------------------------------------------------

    def text_encode(self, tokens, rng=None, train=False) -> Tensor:
        """Contextual embeddings of a blank-interleaved (possibly masked) sequence."""
        emb = T.gather_rows(self.p("embed.tok"), tokens)
        return self._stack(emb, "textenc", self.cfg.peripheral_layers, rng, train)

    def duration_forward(self, tokens, speaker: int | None = None, repeats=None,
                         loss_mask=None, rng=None, train=False):
        """Returns (frame embeddings E_A, repeat logits, duration CE loss or None,
        repeats used, clamp count).

        Train mode upsamples by the supplied ground-truth repeats and scores
        the repeat logits against them; inference upsamples by argmax with
        character repeats clamped to >= 1.
        """
        e_y = self.text_encode(tokens, rng, train)
        h = self._stack(e_y, "durpred", self.cfg.peripheral_layers, rng, train)
        r_logits = self._linear(h, "durpred.out.w", "durpred.out.b")

        clamped = 0
        if repeats is not None:
            r_used = list(repeats)
            targets = np.asarray(r_used, dtype=np.int64)
            over = targets > self.cfg.r_max
            clamped = int(over.sum())
            targets = np.minimum(targets, self.cfg.r_max)
            l_dur = T.cross_entropy(r_logits, targets, mask=loss_mask)
        else:
            pred = np.argmax(r_logits.data, axis=-1)
            r_used = []
            for i, (tok, r) in enumerate(zip(tokens, pred)):
                is_char = (i % 2 == 1)
                r_used.append(max(int(r), 1) if is_char else int(r))
            l_dur = None

        if speaker is not None:
            spk = T.gather_rows(self.p("embed.spk"), [speaker] * len(tokens))
            e_y = T.add(e_y, spk)
        frame_map = np.repeat(np.arange(len(tokens)), r_used)
        e_a = T.gather_rows(e_y, frame_map)
        return e_a, r_logits, l_dur, r_used, clamped

    def mask_embedding_stream(self, t_frames: int) -> Tensor:
        """Frame embeddings for an absent text modality: <mask> embedding repeated."""
        return T.gather_rows(self.p("embed.tok"), [MASK_ID] * t_frames)

    # -- multimodal encoder and heads ----------------------------------------

    def mm_forward(self, x_masked: np.ndarray, e_a: Tensor, rng=None, train=False) -> Tensor:
        t_frames = x_masked.shape[0]
        if e_a.data.shape[0] != t_frames:
            raise T.ContractError(
                f"modality length mismatch: speech {t_frames} vs text {e_a.data.shape[0]}")
        xs = Tensor(np.asarray(x_masked, dtype=self.dtype))
        sx = self._ln(self._linear(xs, "proj_x.w", "proj_x.b"), "proj_x.ln")
        sy = self._ln(T.add(T.matmul(e_a, self.p("proj_y.w")), self.p("proj_y.b")), "proj_y.ln")
        pos = Tensor(positional_encoding(t_frames, self.cfg.d, self.dtype))
        z = T.add(T.add(sx, sy), pos)
        z = self._stack(z, "mm", self.cfg.mm_layers, rng, train)
        return self._ln(z, "mm.ln")

    def speech_head(self, z: Tensor, rng=None, train=False) -> Tensor:
        h = self._stack(z, "speechhead", self.cfg.peripheral_layers, rng, train)
        return self._linear(h, "out_x.w", "out_x.b")

    def text_head(self, z: Tensor, rng=None, train=False) -> Tensor:
        h = self._stack(z, "texthead", self.cfg.peripheral_layers, rng, train)
        return self._linear(h, "out_y.w", "out_y.b")

    # -- precision ----------------------------------------------------------

    def astype(self, dtype) -> "Model":
        """A copy of this model with all parameters cast to `dtype`."""
        params = {k: Tensor(v.data.astype(dtype), requires_grad=True, name=k)
                  for k, v in self.params.items()}
        return Model(self.cfg, self.vocab, params=params, dtype=dtype)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str, model: Model, step: int = 0, rng_state=None,
                    extra: dict | None = None) -> None:
    """Versioned container: JSON header + named float32 little-endian blobs.

    Written to a temp file then renamed so a crash never leaves a partial
    checkpoint behind.
    """
    names = sorted(model.params.keys())
    cfg_dict = asdict(model.cfg)
    digest = hashlib.sha256()
    for n in names:
        digest.update(model.params[n].data.astype("<f4").tobytes())
    header = {
        "params_hash": digest.hexdigest(),
        "version": 1,
        "config": cfg_dict,
        "config_hash": hashlib.sha256(
            json.dumps(cfg_dict, sort_keys=True).encode()).hexdigest(),
        "vocab": model.vocab.tokens,
        "vocab_hash": vocab_hash(model.vocab),
        "step": int(step),
        "rng_state": rng_state,
        "extra": extra or {},
        "params": [{"name": n, "shape": list(model.params[n].data.shape)} for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        for n in names:
            fh.write(model.params[n].data.astype("<f4").tobytes())
    os.replace(tmp, path)


class CheckpointError(RuntimeError):
    pass


def load_checkpoint(path: str):
    """Returns (Model, step, rng_state, extra); refuses version/hash mismatches."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CKPT_MAGIC))
        if magic != CKPT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        hlen = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(hlen))
        if header.get("version") != 1:
            raise CheckpointError(f"{path}: unsupported checkpoint version")
        vocab = Vocabulary(header["vocab"][2:])
        if vocab_hash(vocab) != header["vocab_hash"]:
            raise CheckpointError(f"{path}: vocabulary hash mismatch")
        want = hashlib.sha256(
            json.dumps(header["config"], sort_keys=True).encode()).hexdigest()
        if want != header.get("config_hash"):
            raise CheckpointError(f"{path}: config echo does not match its hash")
        cfg = ModelConfig(**header["config"])
        params = {}
        digest = hashlib.sha256()
        for rec in header["params"]:
            shape = tuple(rec["shape"])
            n = int(np.prod(shape)) if shape else 1
            buf = fh.read(4 * n)
            if len(buf) != 4 * n:
                raise CheckpointError(f"{path}: truncated parameter {rec['name']}")
            digest.update(buf)
            data = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
            params[rec["name"]] = Tensor(data, requires_grad=True, name=rec["name"])
        if header.get("params_hash") != digest.hexdigest():
            raise CheckpointError(f"{path}: parameter payload hash mismatch")
    model = Model(cfg, vocab, params=params)
    return model, header["step"], header.get("rng_state"), header.get("extra", {})
