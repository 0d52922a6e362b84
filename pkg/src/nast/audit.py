"""Finite-difference audits: every primitive, one conformer block, the
duration model, and the two full task graphs, all in 64-bit.

Large graphs are audited on a random subset of coordinates per parameter;
primitives are audited exhaustively.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .alignment import Vocabulary, add_blank
from .ctc import ctc_loss
from .model import Model, ModelConfig
from .tensor import Tensor, grad_check


def _t64(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True, dtype=np.float64)


def audit_primitives(seed: int = 0, eps: float = 1e-5) -> dict:
    """Exhaustive FD check of every primitive op; returns {op: max rel err}."""
    rng = np.random.default_rng(seed)
    out = {}

    a, b = _t64(rng, 3, 4), _t64(rng, 3, 4)
    out["add"] = grad_check(lambda: T.mean_all(T.add(a, b)), [a, b], eps)
    out["sub"] = grad_check(lambda: T.mean_all(T.sub(a, b)), [a, b], eps)
    out["mul"] = grad_check(lambda: T.mean_all(T.mul(a, b)), [a, b], eps)
    out["scale"] = grad_check(lambda: T.sum_all(T.scale(a, 1.7)), [a], eps)

    m, n = _t64(rng, 3, 4), _t64(rng, 4, 2)
    w = Tensor(rng.standard_normal((3, 2)), dtype=np.float64)
    out["matmul"] = grad_check(
        lambda: T.sum_all(T.mul(T.matmul(m, n), w)), [m, n], eps)
    wt = Tensor(rng.standard_normal((4, 3)), dtype=np.float64)
    out["transpose"] = grad_check(
        lambda: T.sum_all(T.mul(T.transpose(m), wt)), [m], eps)
    out["slice_cols"] = grad_check(lambda: T.mean_all(T.slice_cols(a, 1, 3)), [a], eps)
    wcc = Tensor(rng.standard_normal((3, 8)), dtype=np.float64)
    out["concat_cols"] = grad_check(
        lambda: T.mean_all(T.mul(T.concat_cols([a, b]), wcc)), [a, b], eps)

    x = _t64(rng, 4, 6)
    wv = Tensor(rng.standard_normal((4, 6)), dtype=np.float64)
    for name, op in (("sigmoid", T.sigmoid), ("swish", T.swish), ("gelu", T.gelu),
                     ("softmax", T.softmax), ("log_softmax", T.log_softmax),
                     ("glu", T.glu)):
        out[name] = grad_check(lambda op=op: T.sum_all(T.mul(op(x), Tensor(
            wv.data[:, :op(x).data.shape[1]].copy()))), [x], eps)

    g, bta = _t64(rng, 6), _t64(rng, 6)
    out["layer_norm"] = grad_check(
        lambda: T.sum_all(T.mul(T.layer_norm(x, g, bta), wv)), [x, g, bta], eps)

    xc, k = _t64(rng, 5, 3), _t64(rng, 3, 3)
    wc = Tensor(rng.standard_normal((5, 3)), dtype=np.float64)
    out["depthwise_conv1d"] = grad_check(
        lambda: T.sum_all(T.mul(T.depthwise_conv1d(xc, k), wc)), [xc, k], eps)

    table = _t64(rng, 5, 4)
    idx = [0, 2, 2, 4]
    out["gather_rows"] = grad_check(
        lambda: T.mean_all(T.gather_rows(table, idx)), [table], eps)

    dr = _t64(rng, 4, 4)
    out["dropout"] = grad_check(
        lambda: T.mean_all(T.dropout(dr, 0.5, np.random.default_rng(3), train=True)),
        [dr], eps)

    out["sum"] = grad_check(lambda: T.sum_all(a), [a], eps)
    out["mean"] = grad_check(lambda: T.mean_all(a), [a], eps)

    p, q = _t64(rng, 3, 4), Tensor(rng.standard_normal((3, 4)), dtype=np.float64)
    out["l1_loss"] = grad_check(lambda: T.l1_loss(p, q), [p], eps)

    lg = _t64(rng, 4, 5)
    tgt = rng.integers(0, 5, size=4)
    out["cross_entropy"] = grad_check(lambda: T.cross_entropy(lg, tgt), [lg], eps)

    cl = _t64(rng, 4, 3)
    out["ctc_loss"] = grad_check(lambda: ctc_loss(cl, [2, 1]), [cl], eps)
    return out


def _tiny_model(seed: int) -> Model:
    vocab = Vocabulary("abc")
    cfg = ModelConfig(d=8, heads=2, mm_layers=1, peripheral_layers=1, mel_bins=5,
                      vocab_size=len(vocab), r_max=4, conv_kernel=3, dropout=0.0,
                      num_speakers=2)
    return Model(cfg, vocab, seed=seed, dtype=np.float64)


def audit_conformer_block(seed: int = 0, eps: float = 1e-5,
                          max_coords: int = 4) -> float:
    model = _tiny_model(seed)
    rng = np.random.default_rng(seed + 1)
    x = Tensor(rng.standard_normal((4, 8)), requires_grad=True, dtype=np.float64)
    params = [x] + [model.p(n) for n in model.params if n.startswith("mm.0.")]
    w = Tensor(rng.standard_normal((4, 8)), dtype=np.float64)
    return grad_check(lambda: T.sum_all(T.mul(model.conformer_block(x, "mm.0"), w)),
                      params, eps, max_coords=max_coords,
                      rng=np.random.default_rng(seed + 2))


def audit_duration_model(seed: int = 0, eps: float = 1e-5,
                         max_coords: int = 3) -> float:
    model = _tiny_model(seed)
    rng = np.random.default_rng(seed + 3)
    tokens = add_blank(model.vocab.encode("ab"))
    repeats = [1, 2, 0, 1, 1]
    w = Tensor(rng.standard_normal((sum(repeats), 8)), dtype=np.float64)

    def f():
        e_a, _logits, l_dur, _r, _c = model.duration_forward(
            tokens, speaker=1, repeats=repeats)
        return T.add(l_dur, T.sum_all(T.mul(e_a, w)))

    names = [n for n in model.params
             if n.startswith(("embed.", "textenc.", "durpred."))]
    return grad_check(f, [model.p(n) for n in names], eps, max_coords=max_coords,
                      rng=np.random.default_rng(seed + 4))


def _stt_loss(model: Model, x, target):
    e_a = model.mask_embedding_stream(x.shape[0])
    z = model.mm_forward(x, e_a)
    return ctc_loss(model.text_head(z), target)


def _tts_loss(model: Model, tokens, repeats, speaker, target_mel):
    e_a, _logits, l_dur, _r, _c = model.duration_forward(
        tokens, speaker=speaker, repeats=repeats)
    x_in = np.zeros((sum(repeats), model.cfg.mel_bins))
    z = model.mm_forward(x_in, e_a)
    pred = model.speech_head(z)
    return T.add(T.l1_loss(pred, Tensor(target_mel, dtype=np.float64)), l_dur)


def audit_stt_graph(seed: int = 0, eps: float = 1e-5, max_coords: int = 2) -> float:
    model = _tiny_model(seed)
    rng = np.random.default_rng(seed + 5)
    x = rng.standard_normal((6, 5))
    target = model.vocab.encode("ab")
    params = [p for n, p in sorted(model.params.items()) if not n.startswith(
        ("speechhead.", "out_x.", "durpred.", "textenc.", "embed.spk"))]
    return grad_check(lambda: _stt_loss(model, x, target), params, eps,
                      max_coords=max_coords, rng=np.random.default_rng(seed + 6))


def audit_tts_graph(seed: int = 0, eps: float = 1e-5, max_coords: int = 2) -> float:
    model = _tiny_model(seed)
    rng = np.random.default_rng(seed + 7)
    tokens = add_blank(model.vocab.encode("ab"))
    # odd frame count: the per-column sums of L1 sign gradients cannot cancel
    # to an exact zero, which finite differences would read as pure noise
    repeats = [1, 2, 1, 1, 0]
    target = rng.standard_normal((sum(repeats), model.cfg.mel_bins))
    params = [p for n, p in sorted(model.params.items())
              if not n.startswith(("texthead.", "out_y."))]
    return grad_check(lambda: _tts_loss(model, tokens, repeats, 0, target),
                      params, eps, max_coords=max_coords,
                      rng=np.random.default_rng(seed + 8))


def run_audit(seeds=range(10), eps: float = 1e-5, verbose: bool = False) -> dict:
    """Full audit; returns {check: max rel err over seeds}."""
    worst: dict = {}
    for s in seeds:
        prim = audit_primitives(seed=s, eps=eps)
        for k, v in prim.items():
            worst[k] = max(worst.get(k, 0.0), v)
        for name, fn in (("conformer_block", audit_conformer_block),
                         ("duration_model", audit_duration_model),
                         ("stt_graph", audit_stt_graph),
                         ("tts_graph", audit_tts_graph)):
            worst[name] = max(worst.get(name, 0.0), fn(seed=s, eps=eps))
        if verbose:
            print(f"seed {s}: max rel err so far {max(worst.values()):.2e}")
    return worst
