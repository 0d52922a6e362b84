"""Masking schedules: exact counts, blank propagation, coverage statistics."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nast.alignment import BLANK_ID, MASK_ID, Vocabulary, add_blank, upsample_by_repeats
from nast.masking import (
    corner_bounds,
    mask_speech_corner,
    mask_speech_spans,
    mask_text,
    propagate_blank_masks,
    span_coverage_expectation,
)

VOCAB = Vocabulary("CAT")


@given(st.integers(min_value=0, max_value=40),
       st.floats(min_value=0.0, max_value=1.0),
       st.integers(min_value=0, max_value=10_000))
@settings(max_examples=300, deadline=None)
def test_mask_text_exact_count(n, p, seed):
    ids = list(range(2, 2 + n))
    masked, flags = mask_text(ids, p, seed)
    k = int(np.floor(p * n + 0.5))  # round half up
    assert int(flags.sum()) == k
    assert sum(tok == MASK_ID for tok in masked) == k
    # unmasked positions are untouched and token 0 never appears
    for orig, tok, f in zip(ids, masked, flags):
        assert tok == (MASK_ID if f else orig)
        assert tok != BLANK_ID


def test_mask_text_identities():
    ids = [2, 3, 4, 5]
    assert mask_text(ids, 0.0, 0)[0] == ids
    assert mask_text(ids, 1.0, 0)[0] == [MASK_ID] * 4


def test_mask_text_round_half_up():
    ids = [2, 3, 4, 5]  # 0.5*4 = 2.0, 0.375*4 = 1.5 -> 2
    assert sum(t == MASK_ID for t in mask_text(ids, 0.375, 1)[0]) == 2


def test_blank_propagation_worked_example():
    """Masking 'A' in CAT masks its following blank; upsampled with
    repeats (1,2,0,1,1,1,1) this reads _CC<mask><mask>T_."""
    tokens = add_blank(VOCAB.encode("CAT"))
    tokens[3] = MASK_ID  # mask 'A'
    out, flags = propagate_blank_masks(tokens)
    assert VOCAB.decode(out) == "_C_<mask><mask>T_"
    assert flags.tolist() == [False, False, False, True, True, False, False]
    path = upsample_by_repeats(out, [1, 2, 0, 1, 1, 1, 1])
    assert VOCAB.decode(path) == "_CC<mask><mask>T_"


def test_blank_propagation_never_first_blank():
    tokens = add_blank([2])
    tokens[1] = MASK_ID
    out, flags = propagate_blank_masks(tokens)
    assert out[0] == BLANK_ID and not flags[0]
    assert out[2] == MASK_ID and flags[2]


def test_mask_speech_spans_statistics():
    """Monte-Carlo coverage matches the analytic expectation within 3 sigma."""
    t, p, m, trials = 100, 0.0625, 10, 10_000
    x = np.ones((t, 4), dtype=np.float32)
    counts = np.empty(trials)
    rng = np.random.default_rng(99)
    for i in range(trials):
        ms = mask_speech_spans(x, p, m, rng)
        counts[i] = ms.flags.sum()
        assert np.all(ms.payload[ms.flags] == 0.0)
        assert np.all(ms.payload[~ms.flags] == 1.0)
    expected = span_coverage_expectation(t, p, m)
    sigma = counts.std(ddof=1) / np.sqrt(trials)
    assert abs(counts.mean() - expected) < 3 * sigma


def test_span_edges():
    x = np.ones((10, 2), dtype=np.float32)
    assert mask_speech_spans(x, 0.0, 5, 0).flags.sum() == 0
    assert mask_speech_spans(x, 1.0, 5, 0).flags.all()
    # spans clip at the end rather than wrapping
    ms = mask_speech_spans(x, 0.1, 100, 0)
    assert ms.flags[-1]


def test_span_expectation_small_case_brute_force():
    # T=4, p=0.25 -> k=1 start uniform over 4, M=2: coverage per frame
    # is P(start in {max(0,i-1)..i}) = n_i/4
    exp = span_coverage_expectation(4, 0.25, 2)
    assert exp == pytest.approx((1 + 2 + 2 + 2) / 4)


def test_mask_speech_corner_exact_fraction():
    t, f = 20, 16
    for p in (0.0, 0.25, 0.5, 0.9, 1.0):
        x = np.ones((t, f), dtype=np.float32)
        ms = mask_speech_corner(x, p)
        t0, f0 = corner_bounds(t, f, p)
        assert t0 == int(np.floor((1 - p) * t)) and f0 == int(np.floor((1 - p) * f))
        masked_frac = 1.0 - (ms.payload != 0).sum() / (t * f)
        assert masked_frac == pytest.approx(1.0 - (t0 * f0) / (t * f))
        np.testing.assert_array_equal(ms.payload[:t0, :f0], x[:t0, :f0])
        assert ms.payload[t0:].sum() == 0 and ms.payload[:, f0:].sum() == 0


def test_corner_identities():
    x = np.arange(12, dtype=np.float32).reshape(4, 3)
    np.testing.assert_array_equal(mask_speech_corner(x, 0.0).payload, x)
    assert not mask_speech_corner(x, 0.0).flags.any()
    zero = mask_speech_corner(x, 1.0)
    assert zero.payload.sum() == 0 and zero.flags.all()


def test_invalid_probability_rejected():
    x = np.ones((4, 2), dtype=np.float32)
    for bad in (-0.1, 1.1):
        with pytest.raises(ValueError):
            mask_text([2, 3], bad, 0)
        with pytest.raises(ValueError):
            mask_speech_spans(x, bad, 2, 0)
        with pytest.raises(ValueError):
            mask_speech_corner(x, bad)
