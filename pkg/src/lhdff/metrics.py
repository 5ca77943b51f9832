"""Corpus-level caption metrics: BLEU-1..4, ROUGE-L and CIDEr-D.

Inputs are tokenized: ``hypotheses[i]`` is a token list and
``references[i]`` a list of token lists for the same item.
"""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Sequence

Tokens = Sequence[str]

METRIC_NAMES = ("BLEU1", "BLEU2", "BLEU3", "BLEU4", "ROUGEL", "CIDEr")


class MetricInputError(ValueError):
    pass


def ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _check(hypotheses, references) -> None:
    if not hypotheses:
        raise MetricInputError("empty hypothesis corpus")
    if len(hypotheses) != len(references):
        raise MetricInputError("hypotheses and references differ in length")
    if any(len(refs) == 0 for refs in references):
        raise MetricInputError("every item needs at least one reference")


# ---------------------------------------------------------------- BLEU

def bleu_n(hypotheses: Sequence[Tokens], references: Sequence[Sequence[Tokens]], n: int) -> float:
    """Corpus BLEU-n: clipped n-gram precisions (orders 1..n), geometric mean, brevity penalty.

    The effective reference length per item is the closest reference length
    (shorter wins ties). No smoothing: a zero precision at any order gives 0.
    """
    if not 1 <= n <= 4:
        raise MetricInputError("n must be in 1..4")
    _check(hypotheses, references)
    matched = [0] * n
    total = [0] * n
    hyp_len = ref_len = 0
    for hyp, refs in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += min((abs(len(r) - len(hyp)), len(r)) for r in refs)[1]
        for k in range(1, n + 1):
            counts = ngrams(hyp, k)
            max_ref: Counter = Counter()
            for r in refs:
                max_ref |= ngrams(r, k)
            matched[k - 1] += sum(min(c, max_ref[g]) for g, c in counts.items())
            total[k - 1] += max(len(hyp) - k + 1, 0)
    if hyp_len == 0 or any(m == 0 for m in matched):
        return 0.0
    log_precision = sum(math.log(m / t) for m, t in zip(matched, total)) / n
    brevity = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return brevity * math.exp(log_precision)


# ---------------------------------------------------------------- ROUGE-L

def lcs_length(a: Tokens, b: Tokens) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_item(hyp: Tokens, refs: Sequence[Tokens], beta: float = 1.2) -> float:
    if not hyp:
        return 0.0
    best = 0.0
    for ref in refs:
        lcs = lcs_length(hyp, ref)
        if lcs == 0:
            continue
        p, r = lcs / len(hyp), lcs / len(ref)
        best = max(best, (1 + beta ** 2) * p * r / (r + beta ** 2 * p))
    return best


def rouge_l(hypotheses, references, beta: float = 1.2) -> float:
    _check(hypotheses, references)
    return sum(rouge_l_item(h, r, beta) for h, r in zip(hypotheses, references)) / len(hypotheses)


# ---------------------------------------------------------------- CIDEr-D

def _all_ngrams(tokens: Tokens, max_n: int) -> Counter:
    out: Counter = Counter()
    for k in range(1, max_n + 1):
        out.update(ngrams(tokens, k))
    return out


def cider_d_items(hypotheses, references, max_n: int = 4, sigma: float = 6.0) -> list[float]:
    """Per-item CIDEr-D scores (each in [0, 10]); IDF comes from the reference corpus."""
    _check(hypotheses, references)
    n_docs = len(hypotheses)
    if n_docs < 2:
        raise MetricInputError("CIDEr needs a corpus of at least 2 items for document frequencies")
    ref_counts = [[_all_ngrams(r, max_n) for r in refs] for refs in references]
    doc_freq: Counter = Counter()
    for counts in ref_counts:
        doc_freq.update(set().union(*counts))
    log_docs = math.log(n_docs)

    def vectorize(counts: Counter):
        vec = [defaultdict(float) for _ in range(max_n)]
        norm = [0.0] * max_n
        for gram, tf in counts.items():
            k = len(gram) - 1
            w = tf * (log_docs - math.log(max(1.0, doc_freq[gram])))
            vec[k][gram] = w
            norm[k] += w * w
        return vec, [math.sqrt(x) for x in norm]

    scores = []
    for hyp, refs, counts in zip(hypotheses, references, ref_counts):
        vh, nh = vectorize(_all_ngrams(hyp, max_n))
        acc = [0.0] * max_n
        for ref, rc in zip(refs, counts):
            vr, nr = vectorize(rc)
            penalty = math.exp(-((len(hyp) - len(ref)) ** 2) / (2 * sigma ** 2))
            for k in range(max_n):
                dot = sum(min(w, vr[k].get(g, 0.0)) * vr[k].get(g, 0.0) for g, w in vh[k].items())
                if nh[k] != 0 and nr[k] != 0:
                    dot /= nh[k] * nr[k]
                acc[k] += dot * penalty
        scores.append(10.0 * sum(acc) / max_n / len(refs))
    return scores


def cider_d(hypotheses, references, max_n: int = 4, sigma: float = 6.0) -> float:
    items = cider_d_items(hypotheses, references, max_n, sigma)
    return sum(items) / len(items)


# ---------------------------------------------------------------- report

@dataclass
class MetricReport:
    scores: dict[str, float]
    per_item: list[dict] = field(default_factory=list)

    def row(self) -> list[float]:
        return [self.scores[name] for name in METRIC_NAMES]


def evaluate_corpus(hypotheses, references, clip_ids=None) -> MetricReport:
    """All Table-1-style metrics plus a per-item breakdown (sentence-level BLEU, ROUGE-L, CIDEr-D)."""
    scores = {f"BLEU{n}": bleu_n(hypotheses, references, n) for n in range(1, 5)}
    scores["ROUGEL"] = rouge_l(hypotheses, references)
    cider_items = cider_d_items(hypotheses, references)
    scores["CIDEr"] = sum(cider_items) / len(cider_items)
    clip_ids = clip_ids or [str(i) for i in range(len(hypotheses))]
    per_item = []
    for i, (hyp, refs) in enumerate(zip(hypotheses, references)):
        entry = {"clip_id": clip_ids[i], "hypothesis": " ".join(hyp)}
        for n in range(1, 5):
            entry[f"BLEU{n}"] = bleu_n([hyp], [refs], n)
        entry["ROUGEL"] = rouge_l_item(hyp, refs)
        entry["CIDEr"] = cider_items[i]
        per_item.append(entry)
    return MetricReport(scores, per_item)
