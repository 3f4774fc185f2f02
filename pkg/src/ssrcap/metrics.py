"""Corpus BLEU and plain CIDEr over token sequences."""
import math
from collections import Counter

import numpy as np


def ngrams(tokens, n):
    tokens = tuple(tokens)
    return Counter(tokens[i : i + n] for i in range(len(tokens) - n + 1))


def _closest_ref_len(hlen, refs):
    return min((abs(len(r) - hlen), len(r)) for r in refs)[1]


def bleu(hypotheses, references, n=4):
    """Corpus BLEU@n: geometric mean of clipped precisions times the brevity penalty."""
    if not hypotheses:
        raise ValueError("empty corpus")
    if len(hypotheses) != len(references):
        raise ValueError("hypotheses and reference sets are not aligned")
    if not 1 <= n <= 4:
        raise ValueError("n must be in 1..4")
    match = [0] * n
    total = [0] * n
    c = r = 0
    for hyp, refs in zip(hypotheses, references):
        c += len(hyp)
        r += _closest_ref_len(len(hyp), refs)
        for k in range(1, n + 1):
            h = ngrams(hyp, k)
            best = Counter()
            for ref in refs:
                best |= ngrams(ref, k)
            match[k - 1] += sum(min(cnt, best[g]) for g, cnt in h.items())
            total[k - 1] += sum(h.values())
    if c == 0 or min(match) == 0:
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(match, total)) / n
    bp = math.exp(min(0.0, 1.0 - r / c))
    return bp * math.exp(log_p)


def bleu_all(hypotheses, references):
    return [bleu(hypotheses, references, n) for n in range(1, 5)]


class CiderScorer:
    """Plain CIDEr: tf-idf n-gram cosine, averaged over references and n = 1..4, scaled by 10."""

    def __init__(self, n=4):
        self.n = n
        self.df = None
        self.log_n = None

    @property
    def fitted(self):
        return self.df is not None

    def fit(self, reference_sets):
        if not reference_sets:
            raise ValueError("cannot fit CIDEr on an empty corpus")
        df = Counter()
        for refs in reference_sets:
            seen = set()
            for ref in refs:
                for k in range(1, self.n + 1):
                    seen.update(ngrams(ref, k))
            df.update(seen)
        self.df = df
        self.log_n = math.log(float(len(reference_sets)))
        return self

    def _vec(self, tokens):
        vecs = []
        for k in range(1, self.n + 1):
            counts = ngrams(tokens, k)
            vecs.append({g: tf * (self.log_n - math.log(max(1.0, self.df.get(g, 0)))) for g, tf in counts.items()})
        return vecs

    @staticmethod
    def _cos(a, b):
        na = math.sqrt(sum(v * v for v in a.values()))
        nb = math.sqrt(sum(v * v for v in b.values()))
        if na == 0 or nb == 0:
            return 0.0
        return sum(v * b[g] for g, v in a.items() if g in b) / (na * nb)

    def item_score(self, hyp, refs):
        if not self.fitted:
            raise RuntimeError("CIDEr scorer is not fitted")
        hv = self._vec(hyp)
        total = 0.0
        for k in range(self.n):
            total += sum(self._cos(hv[k], rv[k]) for rv in map(self._vec, refs)) / len(refs)
        return 10.0 * total / self.n

    def item_scores(self, hypotheses, reference_sets):
        return np.array([self.item_score(h, r) for h, r in zip(hypotheses, reference_sets)])


def cider(hypotheses, reference_sets, scorer=None):
    """Corpus CIDEr (mean item score) and the per-item scores; fits on the references if needed."""
    if not hypotheses:
        raise ValueError("empty corpus")
    if scorer is None:
        scorer = CiderScorer().fit(reference_sets)
    scores = scorer.item_scores(hypotheses, reference_sets)
    return float(scores.mean()), scores
