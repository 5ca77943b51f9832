"""Deliberately naive reference implementations used to cross-check the metrics.

Everything here enumerates explicitly (position-by-position n-gram matching,
full LCS tables, dense TF-IDF vectors over an explicit n-gram index) and shares
no code with :mod:`lhdff.metrics`.
"""

from __future__ import annotations

import math


def _grams(tokens, n):
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def _count(items, x):
    c = 0
    for it in items:
        if it == x:
            c += 1
    return c


def bleu(hypotheses, references, n):
    matched, total = [0] * n, [0] * n
    c_len = r_len = 0
    for hyp, refs in zip(hypotheses, references):
        c_len += len(hyp)
        best = None
        for r in refs:
            key = (abs(len(r) - len(hyp)), len(r))
            if best is None or key < best:
                best = key
        r_len += best[1]
        for k in range(1, n + 1):
            hg = _grams(hyp, k)
            total[k - 1] += len(hg)
            for g in set(hg):
                cap = max(_count(_grams(r, k), g) for r in refs)
                matched[k - 1] += min(_count(hg, g), cap)
    if c_len == 0 or 0 in matched:
        return 0.0
    geo = math.exp(sum(math.log(matched[k] / total[k]) for k in range(n)) / n)
    bp = 1.0 if c_len > r_len else math.exp(1 - r_len / c_len)
    return bp * geo


def lcs(a, b):
    table = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            if a[i - 1] == b[j - 1]:
                table[i][j] = table[i - 1][j - 1] + 1
            else:
                table[i][j] = max(table[i - 1][j], table[i][j - 1])
    return table[len(a)][len(b)]


def rouge_l(hypotheses, references, beta=1.2):
    total = 0.0
    for hyp, refs in zip(hypotheses, references):
        fs = [0.0]
        for r in refs:
            l = lcs(hyp, r)
            if l and hyp:
                p, rc = l / len(hyp), l / len(r)
                fs.append((1 + beta * beta) * p * rc / (rc + beta * beta * p))
        total += max(fs)
    return total / len(hypotheses)


def cider_d(hypotheses, references, max_n=4, sigma=6.0):
    n_docs = len(hypotheses)
    per_item = []
    for i, (hyp, refs) in enumerate(zip(hypotheses, references)):
        item = 0.0
        for k in range(1, max_n + 1):
            # explicit index of every k-gram occurring anywhere in the corpus
            index = sorted({g for h, rs in zip(hypotheses, references) for s in [h] + list(rs) for g in _grams(s, k)})
            idf = []
            for g in index:
                df = sum(1 for rs in references if any(g in _grams(s, k) for s in rs))
                idf.append(math.log(n_docs) - math.log(max(1.0, df)))

            def dense(sentence):
                grams = _grams(sentence, k)
                return [_count(grams, g) * w for g, w in zip(index, idf)]

            vh = dense(hyp)
            for r in refs:
                vr = dense(r)
                num = sum(min(a, b) * b for a, b in zip(vh, vr))
                nh = math.sqrt(sum(a * a for a in vh))
                nr = math.sqrt(sum(b * b for b in vr))
                sim = num / (nh * nr) if nh and nr else num
                item += sim * math.exp(-((len(hyp) - len(r)) ** 2) / (2 * sigma * sigma)) / len(refs)
        per_item.append(10.0 * item / max_n)
    return sum(per_item) / n_docs
