"""Corpus BLEU-1..4, ROUGE-L and CIDEr-D over whitespace-tokenised captions.

Formulations pinned here:

* BLEU: corpus-level clipped n-gram precision, geometric mean over orders
  ``1..n``, brevity penalty against the closest reference length (ties to the
  shorter).  No smoothing: any zero precision zeroes that order's score.
* ROUGE-L: LCS F-measure with ``beta = 1.2``, best reference per candidate,
  averaged over the corpus.
* CIDEr-D: per-order TF-IDF vectors with document frequencies from the
  reference corpus, candidate counts clipped at the reference counts, a
  Gaussian length penalty with ``sigma = 6``, mean over orders and
  references, scaled by 10.
"""

from __future__ import annotations

import math
import warnings
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

from .errors import ContractError

Ngram = tuple[str, ...]


def _tokens(x) -> list[str]:
    return x.split() if isinstance(x, str) else list(x)


def ngram_counts(tokens: Sequence[str], n_max: int = 4) -> Counter:
    """Counts of every n-gram (``1 <= n <= n_max``)."""
    counts: Counter = Counter()
    for n in range(1, n_max + 1):
        for i in range(len(tokens) - n + 1):
            counts[tuple(tokens[i : i + n])] += 1
    return counts


def bleu(candidates: Sequence, references: Sequence[Sequence], n_max: int = 4) -> list[float]:
    """Corpus BLEU; returns ``[B@1, ..., B@n_max]``."""
    if not candidates:
        raise ContractError("bleu on an empty corpus")
    if len(candidates) != len(references):
        raise ContractError("candidate/reference lists are not aligned")
    matched = [0] * n_max
    total = [0] * n_max
    cand_len = ref_len = 0
    for cand, refs in zip(candidates, references):
        if not refs:
            raise ContractError("every candidate needs at least one reference")
        c = _tokens(cand)
        rs = [_tokens(r) for r in refs]
        cand_len += len(c)
        ref_len += min((abs(len(r) - len(c)), len(r)) for r in rs)[1]
        c_counts = ngram_counts(c, n_max)
        max_ref: Counter = Counter()
        for r in rs:
            for g, k in ngram_counts(r, n_max).items():
                if k > max_ref[g]:
                    max_ref[g] = k
        for g, k in c_counts.items():
            matched[len(g) - 1] += min(k, max_ref[g])
        for n in range(1, n_max + 1):
            total[n - 1] += max(len(c) - n + 1, 0)
    if cand_len == 0:
        return [0.0] * n_max
    bp = 1.0 if cand_len >= ref_len else math.exp(1.0 - ref_len / cand_len)
    scores = []
    log_sum = 0.0
    for n in range(n_max):
        if matched[n] == 0 or total[n] == 0:
            scores.extend([0.0] * (n_max - n))
            break
        log_sum += math.log(matched[n] / total[n])
        scores.append(bp * math.exp(log_sum / (n + 1)))
    return scores


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, references: Sequence, beta: float = 1.2) -> float:
    """LCS F-measure of one candidate, maximised over references."""
    if not references:
        raise ContractError("rouge_l needs at least one reference")
    c = _tokens(candidate)
    if not c:
        return 0.0
    best = 0.0
    for ref in references:
        r = _tokens(ref)
        lcs = lcs_length(c, r)
        if lcs == 0 or not r:
            continue
        p, rec = lcs / len(c), lcs / len(r)
        best = max(best, (1 + beta**2) * p * rec / (rec + beta**2 * p))
    return best


def corpus_rouge_l(candidates: Sequence, references: Sequence[Sequence]) -> float:
    if not candidates:
        raise ContractError("rouge_l on an empty corpus")
    return sum(rouge_l(c, r) for c, r in zip(candidates, references)) / len(candidates)


@dataclass(frozen=True)
class CorpusIdf:
    """Document frequencies of n-grams over a reference corpus (one document per image)."""

    df: dict
    size: int
    n_max: int = 4

    @classmethod
    def build(cls, references: Sequence[Sequence], n_max: int = 4) -> "CorpusIdf":
        if not references:
            raise ContractError("CorpusIdf needs at least one image")
        df: Counter = Counter()
        for refs in references:
            seen = set()
            for r in refs:
                seen.update(ngram_counts(_tokens(r), n_max))
            df.update(seen)
        return cls(dict(df), len(references), n_max)

    def idf(self, gram: Ngram) -> float:
        return math.log(float(self.size)) - math.log(max(1.0, float(self.df.get(gram, 0))))


def _tfidf(tokens: list[str], idf: CorpusIdf):
    vec = [dict() for _ in range(idf.n_max)]
    norm = [0.0] * idf.n_max
    for g, tf in ngram_counts(tokens, idf.n_max).items():
        n = len(g) - 1
        v = float(tf) * idf.idf(g)
        vec[n][g] = v
        norm[n] += v * v
    return vec, [math.sqrt(x) for x in norm], len(tokens)


def _cider_sim(cand, ref, sigma: float) -> list[float]:
    (vc, nc, lc), (vr, nr, lr) = cand, ref
    delta = float(lc - lr)
    out = []
    for n in range(len(vc)):
        val = 0.0
        for g, x in vc[n].items():
            if g in vr[n]:
                val += min(x, vr[n][g]) * vr[n][g]
        if nc[n] != 0 and nr[n] != 0:
            val /= nc[n] * nr[n]
        out.append(val * math.exp(-(delta**2) / (2.0 * sigma**2)))
    return out


def cider_d(candidates: Sequence, references: Sequence[Sequence], idf: CorpusIdf | None = None,
            sigma: float = 6.0) -> tuple[float, list[float]]:
    """CIDEr-D; returns ``(corpus mean, per-item scores)``.

    ``idf`` defaults to document frequencies of ``references`` themselves.
    """
    if len(candidates) != len(references):
        raise ContractError("candidate/reference lists are not aligned")
    if not candidates:
        raise ContractError("cider_d on an empty corpus")
    if idf is None:
        idf = CorpusIdf.build(references)
    if idf.size < 2:
        warnings.warn("CIDEr-D with a single-image corpus: every IDF weight is 0", RuntimeWarning)
    scores = []
    for cand, refs in zip(candidates, references):
        vc = _tfidf(_tokens(cand), idf)
        acc = [0.0] * idf.n_max
        for r in refs:
            for n, s in enumerate(_cider_sim(vc, _tfidf(_tokens(r), idf), sigma)):
                acc[n] += s
        scores.append(10.0 * sum(acc) / idf.n_max / len(refs))
    return sum(scores) / len(scores), scores


def evaluation_report(candidates: Sequence, references: Sequence[Sequence]) -> dict:
    """Structured metric record: BLEU-1..4, ROUGE-L, CIDEr-D and item count."""
    b = bleu(candidates, references)
    report = {f"B@{i + 1}": b[i] for i in range(4)}
    report["ROUGE_L"] = corpus_rouge_l(candidates, references)
    report["CIDEr-D"] = cider_d(candidates, references)[0]
    report["count"] = len(candidates)
    return report
