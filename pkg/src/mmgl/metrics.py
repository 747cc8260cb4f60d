"""BLEU-4, ROUGE-L and CIDEr over whitespace-tokenized, lowercased sentences."""

import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import _ext


def tokenize(text):
    return text.lower().split()


def _as_tokens(s):
    return tokenize(s) if isinstance(s, str) else list(s)


def ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _bleu_counts(hyp, refs, max_n=4):
    matches, totals = [], []
    for n in range(1, max_n + 1):
        h = ngrams(hyp, n)
        best = Counter()
        for r in refs:
            for g, c in ngrams(r, n).items():
                best[g] = max(best[g], c)
        matches.append(sum(min(c, best[g]) for g, c in h.items()))
        totals.append(max(0, len(hyp) - n + 1))
    ref_len = min((abs(len(r) - len(hyp)), len(r)) for r in refs)[1]
    return matches, totals, len(hyp), ref_len


def _bleu_from_counts(matches, totals, hyp_len, ref_len):
    if hyp_len == 0 or any(t == 0 or m == 0 for m, t in zip(matches, totals)):
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matches, totals)) / len(matches)
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return bp * math.exp(log_p)


def bleu4(hyp, refs):
    """Unsmoothed sentence BLEU-4 (any zero n-gram precision gives 0)."""
    hyp = _as_tokens(hyp)
    refs = [_as_tokens(r) for r in refs]
    if not refs:
        raise ValueError("bleu4 needs at least one reference")
    if not hyp:
        return 0.0
    return _bleu_from_counts(*_bleu_counts(hyp, refs))


def corpus_bleu4(hyps, refs_list):
    """BLEU-4 over summed n-gram counts and lengths of the whole corpus."""
    if len(hyps) != len(refs_list):
        raise ValueError("hypothesis and reference lists differ in length")
    matches, totals = [0] * 4, [0] * 4
    hyp_len = ref_len = 0
    for hyp, refs in zip(hyps, refs_list):
        hyp = _as_tokens(hyp)
        refs = [_as_tokens(r) for r in refs]
        if not refs:
            raise ValueError("bleu4 needs at least one reference")
        m, t, h, r = _bleu_counts(hyp, refs)
        matches = [a + b for a, b in zip(matches, m)]
        totals = [a + b for a, b in zip(totals, t)]
        hyp_len += h
        ref_len += r
    return _bleu_from_counts(matches, totals, hyp_len, ref_len)


def lcs_length(a, b):
    ids = {}
    x = np.array([ids.setdefault(t, len(ids)) for t in a], dtype=np.int_)
    y = np.array([ids.setdefault(t, len(ids)) for t in b], dtype=np.int_)
    return int(_ext.lcs_length(x, y))


def rouge_l(hyp, ref):
    """LCS-based F1 between a hypothesis and one reference."""
    hyp, ref = _as_tokens(hyp), _as_tokens(ref)
    if not hyp or not ref:
        return 0.0
    lcs = lcs_length(hyp, ref)
    if lcs == 0:
        return 0.0
    p = lcs / len(hyp)
    r = lcs / len(ref)
    return 2 * p * r / (p + r)


@dataclass
class CorpusStats:
    df: Counter
    m: int

    @classmethod
    def from_refs(cls, refs, max_n=4):
        df = Counter()
        for ref in refs:
            ref = _as_tokens(ref)
            for n in range(1, max_n + 1):
                df.update(ngrams(ref, n).keys())
        return cls(df, len(refs))

    def idf(self, gram):
        # n-grams unseen in the references get df=1 (log stays finite)
        return math.log(self.m / max(1, self.df.get(gram, 0)))


def _tfidf(tokens, n, stats):
    return {g: c * stats.idf(g) for g, c in ngrams(tokens, n).items()}


def _cosine(u, v):
    nu = math.sqrt(sum(x * x for x in u.values()))
    nv = math.sqrt(sum(x * x for x in v.values()))
    if nu == 0 or nv == 0:
        return 0.0
    return sum(x * v.get(g, 0.0) for g, x in u.items()) / (nu * nv)


def cider_item(hyp, ref, stats, max_n=4):
    hyp, ref = _as_tokens(hyp), _as_tokens(ref)
    sims = [_cosine(_tfidf(hyp, n, stats), _tfidf(ref, n, stats)) for n in range(1, max_n + 1)]
    return 10.0 * sum(sims) / max_n


def cider(hyps, refs, stats=None):
    """Plain CIDEr (count TF, ln(m/df) IDF, cosine per n, mean over n=1..4, x10)."""
    if not hyps:
        raise ValueError("cider over an empty corpus")
    if len(hyps) != len(refs):
        raise ValueError("hypothesis and reference lists differ in length")
    refs = [r[0] if isinstance(r, (list, tuple)) and r and not isinstance(r[0], str) else r
            for r in refs]
    stats = stats or CorpusStats.from_refs(refs)
    return sum(cider_item(h, r, stats) for h, r in zip(hyps, refs)) / len(hyps)
