import csv
import io
import itertools
import shutil

import numpy as np
import pytest

from lhdff import oracles
from lhdff.ablation import MissingCheckpointError, evaluate_checkpoints, run_ablation_eval
from lhdff.checkpoint import VocabularyMismatchError
from lhdff.core import Tensor
from lhdff.decoding import beam_decode, beam_search, greedy_decode, greedy_search
from lhdff.metrics import METRIC_NAMES, MetricInputError, bleu_n, cider_d, cider_d_items, evaluate_corpus, rouge_l
from lhdff.data import CaptionDataset
from lhdff.model import LHDFF, ModelConfig, fuse
from lhdff.text import EOS, build_vocab
from lhdff.training import TrainConfig, train


def table_step(table):
    """Step function over a dict ``prefix tuple -> score row`` (log domain)."""
    def step(prefixes):
        return np.stack([np.asarray(table[tuple(p)], dtype=float) for p in prefixes])
    return step


def _log(p):
    return np.log(np.asarray(p, dtype=float))


# ---------------------------------------------------------------- search

def test_greedy_suboptimal_beam_finds_best():
    # tokens: 0 pad, 1 sos, 2 eos, 3 "a", 4 "b"
    tiny = 1e-9
    table = {
        (1,): _log([tiny, tiny, tiny, 0.6, 0.4]),
        (1, 3): _log([tiny, tiny, 0.34, 0.33, 0.33]),
        (1, 4): _log([tiny, tiny, 0.95, 0.025, 0.025]),
    }
    for a, b in itertools.product((3, 4), repeat=2):
        table.setdefault((1, a, b), _log([tiny, tiny, 1.0, tiny, tiny]))
    step = table_step(table)
    # brute force over all length-2 captions ending in eos
    best = max(((a,), table[(1,)][a] + table[(1, a)][EOS]) for a in (3, 4))
    assert greedy_search(step, 5).tokens == [3]
    assert beam_search(step, 2, 5).tokens == list(best[0]) == [4]


def test_beam_one_equals_greedy():
    rng = np.random.default_rng(0)
    cache = {}

    def step(prefixes):
        rows = []
        for p in prefixes:
            key = tuple(p)
            if key not in cache:
                cache[key] = np.log(rng.dirichlet(np.ones(7)))
            rows.append(cache[key])
        return np.stack(rows)

    for _ in range(5):
        cache.clear()
        g = greedy_search(step, 10).tokens
        assert beam_search(step, 1, 10).tokens == g


def test_exhaustive_beam_single_step():
    scores = _log([0.01, 0.01, 0.1, 0.5, 0.38])
    step = table_step({(1,): scores, **{(1, t): _log([0.01, 0.01, 0.96, 0.01, 0.01]) for t in range(5)}})
    assert beam_search(step, 5, 1).tokens in ([3], [])
    assert beam_search(step, 5, 1).score == pytest.approx(scores.max())


def test_lmax_one_budget():
    step = table_step({(1,): _log([0.1, 0.1, 0.1, 0.6, 0.1])})
    assert len(greedy_search(step, 1).tokens) <= 1


def test_shift_invariance_of_fused_greedy():
    rng = np.random.default_rng(1)
    l1 = {}
    l2 = {}

    def logits(store, key):
        if key not in store:
            store[key] = rng.normal(size=6)
        return store[key]

    def make_step(shift):
        def step(prefixes):
            a = np.stack([logits(l1, tuple(p)) + shift for p in prefixes])
            b = np.stack([logits(l2, tuple(p)) - 2 * shift for p in prefixes])
            return fuse(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64)).p_fusion.data
        return step

    base = greedy_search(make_step(0.0), 8).tokens
    assert greedy_search(make_step(37.5), 8).tokens == base


def test_model_decoding_paths(micro_data):
    _, vocab, data = micro_data
    model = LHDFF(ModelConfig(vocab_size=len(vocab)), np.random.default_rng(0)).eval()
    mel = data.mels[0].frames
    g = greedy_decode(model, mel, l_max=6)
    assert beam_decode(model, mel, beam_size=1, l_max=6) == g
    assert len(greedy_decode(model, mel, l_max=1)) <= 1


# ---------------------------------------------------------------- metrics

def split(s):
    return s.split()


def test_bleu_identity_and_disjoint():
    hyps = [split("a b c d"), split("e f g h i")]
    refs = [[h] for h in hyps]
    for n in range(1, 5):
        assert bleu_n(hyps, refs, n) == pytest.approx(1.0)
        assert bleu_n(hyps, [[split("x y z w")], [split("u v s t q")]], n) == 0.0


def test_bleu_brevity_example():
    score = bleu_n([split("the cat sat")], [[split("the cat sat down")]], 1)
    assert score == pytest.approx(np.exp(1 - 4 / 3))
    assert round(score, 4) == 0.7165


def test_bleu_empty_corpus():
    with pytest.raises(MetricInputError):
        bleu_n([], [], 1)


def test_rouge_examples():
    assert rouge_l([split("a b c")], [[split("a b c")]]) == pytest.approx(1.0)
    assert rouge_l([split("a b c")], [[split("x y z")]]) == 0.0
    assert rouge_l([split("a b c")], [[split("a x c")]]) == pytest.approx(2 / 3)
    assert rouge_l([[]], [[split("a")]]) == 0.0


def test_cider_identity_needs_item_disjoint_corpus():
    hyps = [split("a b c d e"), split("f g h i j"), split("k l m n o")]
    assert cider_d_items(hyps, [[h] for h in hyps]) == pytest.approx([10.0] * 3)


def test_cider_disjoint():
    hyps = [split("a b c"), split("d e f")]
    assert cider_d(hyps, [[split("x y z")], [split("u v w")]]) == 0.0


def test_cider_single_item_rejected():
    with pytest.raises(MetricInputError):
        cider_d([split("a")], [[split("a")]])


def test_cider_two_item_hand_vectors():
    hyps = [split("a b"), split("c d")]
    refs = [[split("a b")], [split("a c d")]]
    got = cider_d(hyps, refs)
    assert got == pytest.approx(oracles.cider_d(hyps, refs), abs=1e-12)
    # item 0: "a" occurs in both references (idf 0), so only "b" and bigram "a b" carry weight
    w = np.log(2.0)
    item0 = 10 * ((w * w) / (w * w) + 1.0) / 4
    # item 1: unigrams c, d (idf log 2) against ref {a: 0, c, d} give cosine 1; bigrams {c d} against
    # {a c, c d} give w^2 / (w * w sqrt 2); length gap 1 under sigma 6
    pen = np.exp(-1 / 72)
    item1 = 10 * pen * (1.0 + 1 / np.sqrt(2)) / 4
    assert got == pytest.approx((item0 + item1) / 2, rel=1e-12)


def test_metrics_against_oracles_random():
    rng = np.random.default_rng(9)
    words = list("abcdefg")
    for _ in range(10):
        n = int(rng.integers(2, 5))
        hyps = [list(rng.choice(words, int(rng.integers(0, 7)))) for _ in range(n)]
        refs = [[list(rng.choice(words, int(rng.integers(1, 7)))) for _ in range(int(rng.integers(1, 4)))]
                for _ in range(n)]
        for k in range(1, 5):
            assert bleu_n(hyps, refs, k) == pytest.approx(oracles.bleu(hyps, refs, k), abs=1e-12)
        assert rouge_l(hyps, refs) == pytest.approx(oracles.rouge_l(hyps, refs), abs=1e-12)
        assert cider_d(hyps, refs) == pytest.approx(oracles.cider_d(hyps, refs), abs=1e-12)


def test_evaluate_corpus_report():
    hyps = [split("a b c"), split("d e")]
    report = evaluate_corpus(hyps, [[h] for h in hyps], ["x", "y"])
    assert list(report.scores) == list(METRIC_NAMES)
    assert report.per_item[1]["clip_id"] == "y" and report.per_item[1]["hypothesis"] == "d e"


# ---------------------------------------------------------------- checkpoint evaluation

@pytest.fixture(scope="module")
def mode_checkpoints(micro_data, tmp_path_factory):
    manifest, vocab, data = micro_data
    small = data.subset([0, 1])
    paths = {}
    for mode in ("dual", "fusion_only", "high_only"):
        out = tmp_path_factory.mktemp(mode)
        train(TrainConfig(epochs=1, batch_size=2, mode=mode, augment=False), small, vocab, out_dir=out)
        paths[mode] = out / "last.ckpt"
    test_manifest = type(manifest)(manifest.items[:3], "test")
    return paths, test_manifest, data.mels[:3]


def test_ablation_table_shape(mode_checkpoints, tmp_path):
    paths, manifest, mels = mode_checkpoints
    table = run_ablation_eval(paths, manifest, mels)
    assert [r.mode for r in table.rows] == ["dual", "fusion_only", "high_only"]
    rows = list(csv.reader(io.StringIO(table.to_csv())))
    assert rows[0] == ["model"] + list(METRIC_NAMES) and len(rows) == 4
    assert len(table.to_text().splitlines()) == 5
    table.write(tmp_path)
    assert {p.name for p in tmp_path.iterdir()} == {"metrics.csv", "losses.csv", "metrics.txt", "items.jsonl"}


def test_identical_checkpoints_identical_rows(mode_checkpoints):
    paths, manifest, mels = mode_checkpoints
    same = {"a": paths["dual"], "b": paths["dual"], "c": paths["dual"]}
    table = evaluate_checkpoints(same, manifest, mels)
    rows = [r.report.row() for r in table.rows]
    assert rows[0] == rows[1] == rows[2]


def test_missing_checkpoint_listed(mode_checkpoints, tmp_path):
    paths, manifest, mels = mode_checkpoints
    with pytest.raises(MissingCheckpointError, match="high_only"):
        run_ablation_eval({"dual": paths["dual"], "fusion_only": paths["fusion_only"],
                           "high_only": tmp_path / "nope.ckpt"}, manifest, mels)


def test_vocab_mismatch_refused(mode_checkpoints, micro_data, tmp_path):
    paths, manifest, mels = mode_checkpoints
    _, _, data = micro_data
    other = build_vocab([["one", "two", "three"]])
    rows = [(0, np.array([1, 4, 5, 2], dtype=np.int64))]
    train(TrainConfig(epochs=1, batch_size=1, augment=False), CaptionDataset(data.mels[:1], [[["one"]]], rows),
          other, out_dir=tmp_path)
    shutil.copy(paths["dual"], tmp_path / "dual.ckpt")
    with pytest.raises(VocabularyMismatchError):
        evaluate_checkpoints({"x": tmp_path / "dual.ckpt", "y": tmp_path / "last.ckpt"}, manifest, mels)


def test_empty_test_manifest(mode_checkpoints):
    paths, manifest, _ = mode_checkpoints
    with pytest.raises(ValueError, match="no usable items"):
        evaluate_checkpoints({"d": paths["dual"]}, type(manifest)([], "test"), [])
