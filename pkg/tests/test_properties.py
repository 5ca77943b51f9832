import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lhdff.core import Tensor, float64_mode
from lhdff.metrics import bleu_n, cider_d, rouge_l
from lhdff.model import align_time, fuse
from lhdff.text import EOS, PAD, SOS, CaptionBatch, Vocabulary, encode_caption

WORDS = ["dog", "barks", "rain", "falls", "car", "passes", "bird", "sings"]
word = st.sampled_from(WORDS)
caption = st.lists(word, min_size=1, max_size=12)
VOCAB = Vocabulary(WORDS)


@given(caption, st.integers(3, 16))
def test_encode_decode_round_trip(tokens, l_max):
    row, truncated = encode_caption(tokens, VOCAB, l_max)
    assert row.shape == (l_max,) and row[0] == SOS
    assert truncated == (len(tokens) > l_max - 2)
    assert VOCAB.decode(row[1:]) == tokens[: l_max - 2]


@given(st.lists(caption, min_size=1, max_size=6), st.integers(3, 16))
def test_caption_batch_invariants(captions, l_max):
    batch = CaptionBatch.from_captions(captions, VOCAB, l_max)
    ids = batch.token_ids
    assert ids.shape == (len(captions), l_max)
    for row, n in zip(ids, batch.lengths):
        assert row[n - 1] == EOS and np.all(row[n:] == PAD) and np.all(row[:n] != PAD)
    x, y = batch.inputs(), batch.targets()
    assert x.shape == y.shape
    np.testing.assert_array_equal(x[:, 1:], y[:, :-1])


@given(st.integers(1, 3), st.integers(1, 40), st.integers(1, 20), st.integers(1, 5))
def test_align_time_shape(b, t_src, target, d):
    x = np.arange(b * t_src * d, dtype=np.float32).reshape(b, t_src, d)
    out = align_time(Tensor(x), target).data
    assert out.shape == (b, target, d)
    if t_src == target:
        np.testing.assert_array_equal(out, x)


@settings(deadline=None)
@given(arrays(np.float64, (2, 3, 7), elements=st.floats(-30, 30)),
       arrays(np.float64, (2, 3, 7), elements=st.floats(-30, 30)),
       st.floats(-50, 50))
def test_fusion_is_additive_and_shift_invariant(a, b, shift):
    with float64_mode():
        dist = fuse(Tensor(a), Tensor(b))
        np.testing.assert_array_equal(dist.p_fusion.data, dist.p_td1.data + dist.p_td2.data)
        shifted = fuse(Tensor(a + shift), Tensor(b))
    np.testing.assert_allclose(shifted.p_fusion.data, dist.p_fusion.data, atol=1e-9)
    assert np.all(dist.p_fusion.data <= 1e-12)


corpus = st.integers(2, 5).flatmap(lambda n: st.tuples(
    st.lists(st.lists(word, max_size=8), min_size=n, max_size=n),
    st.lists(st.lists(caption, min_size=1, max_size=3), min_size=n, max_size=n)))


@settings(deadline=None)
@given(corpus)
def test_metric_bounds(pair):
    hyps, refs = pair
    for n in range(1, 5):
        assert 0.0 <= bleu_n(hyps, refs, n) <= 1.0 + 1e-12
    assert 0.0 <= rouge_l(hyps, refs) <= 1.0 + 1e-12
    assert 0.0 <= cider_d(hyps, refs) <= 10.0 + 1e-9
