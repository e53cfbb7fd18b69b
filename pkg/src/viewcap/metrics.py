"""Reference-based caption metrics: BLEU@1-4, ROUGE-L, CIDEr, distinct-n.

All metrics operate on already-tokenized captions (sequences of hashable
tokens, typically words or token ids).  They are pure functions: exactly
reproducible for fixed inputs and invariant to the ordering of references.

Conventions
-----------
* ``bleu`` is clipped n-gram precision combined by a geometric mean with a
  brevity penalty.  Smoothing (when enabled) adds one to the numerator and
  denominator of every order >= 2.  The brevity penalty uses the reference
  whose length is closest to the candidate's, breaking ties toward the
  shorter reference.
* ``rouge_l`` is the longest-common-subsequence F1 against the best
  reference.
* ``cider`` is corpus-level: the average over n = 1..4 of the cosine
  similarity between tf-idf n-gram vectors of candidate and references,
  scaled by 10.  Document frequencies are counted over the reference sets,
  one "document" per example.  No length penalty is applied.  Corpora with
  fewer than two documents have degenerate idf (every idf is zero); they
  are warned about, not rejected.
* ``distinct_n`` is the number of unique n-grams divided by the total
  number of n-grams across all candidates.
"""

from __future__ import annotations

import math
import warnings
from collections import Counter
from dataclasses import dataclass, field
from typing import Hashable, Sequence

Tokens = Sequence[Hashable]

__all__ = [
    "MetricsReport",
    "bleu",
    "cider",
    "compute_metrics_report",
    "distinct_n",
    "ngram_counts",
    "lcs_length",
    "rouge_l",
]


def ngram_counts(tokens: Tokens, n: int) -> Counter:
    """Multiset of the contiguous n-grams of ``tokens`` as a Counter."""
    if n < 1:
        raise ValueError(f"n-gram order must be >= 1, got {n}")
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _check_pair(candidate: Tokens, references: Sequence[Tokens]) -> None:
    if len(candidate) == 0:
        raise ValueError("candidate must be non-empty")
    if len(references) == 0:
        raise ValueError("references must be non-empty")
    for i, ref in enumerate(references):
        if len(ref) == 0:
            raise ValueError(f"reference {i} is empty; references must be non-empty")


def bleu(
    candidate: Tokens,
    references: Sequence[Tokens],
    max_n: int = 4,
    smoothing: bool = False,
) -> float:
    """Clipped n-gram precision BLEU of ``candidate`` against ``references``.

    Returns the geometric mean of clipped n-gram precisions for orders
    1..max_n, multiplied by the brevity penalty.  A zero precision at any
    order makes the score 0.0 (only possible at order 1 when smoothing is
    enabled, since smoothing keeps higher orders positive).
    """
    if not 1 <= max_n <= 4:
        raise ValueError(f"max_n must be in 1..4, got {max_n}")
    _check_pair(candidate, references)

    log_sum = 0.0
    for n in range(1, max_n + 1):
        cand_counts = ngram_counts(candidate, n)
        matches = 0
        for gram, count in cand_counts.items():
            best = max(ngram_counts(ref, n)[gram] for ref in references)
            matches += min(count, best)
        total = sum(cand_counts.values())
        if smoothing and n >= 2:
            matches += 1
            total += 1
        if total == 0 or matches == 0:
            return 0.0
        log_sum += math.log(matches / total) / max_n

    c_len = len(candidate)
    best_ref_len = min((abs(len(r) - c_len), len(r)) for r in references)[1]
    if c_len > best_ref_len:
        bp = 1.0
    else:
        bp = math.exp(1.0 - best_ref_len / c_len)
    return bp * math.exp(log_sum)


def lcs_length(a: Tokens, b: Tokens) -> int:
    """Length of the longest common subsequence of ``a`` and ``b``."""
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        curr = [0] * (len(b) + 1)
        for j, y in enumerate(b, start=1):
            if x == y:
                curr[j] = prev[j - 1] + 1
            else:
                curr[j] = max(prev[j], curr[j - 1])
        prev = curr
    return prev[len(b)]


def rouge_l(candidate: Tokens, references: Sequence[Tokens]) -> float:
    """Longest-common-subsequence F1 against the best reference."""
    _check_pair(candidate, references)
    best = 0.0
    for ref in references:
        lcs = lcs_length(candidate, ref)
        if lcs == 0:
            continue
        precision = lcs / len(candidate)
        recall = lcs / len(ref)
        best = max(best, 2.0 * precision * recall / (precision + recall))
    return best


def cider(
    candidates: Sequence[Tokens],
    reference_sets: Sequence[Sequence[Tokens]],
    max_n: int = 4,
) -> float:
    """Corpus-level tf-idf n-gram cosine score, averaged over n and scaled by 10.

    ``candidates[i]`` is scored against ``reference_sets[i]``; document
    frequencies are counted over the reference sets (an n-gram's df is the
    number of examples in whose references it appears).  The per-example
    score is the mean cosine similarity against each reference, averaged
    over orders 1..max_n and multiplied by 10; the corpus score is the mean
    over examples.
    """
    if len(candidates) == 0:
        raise ValueError("candidates must be non-empty")
    if len(candidates) != len(reference_sets):
        raise ValueError(
            f"got {len(candidates)} candidates but {len(reference_sets)} reference sets"
        )
    for i, (cand, refs) in enumerate(zip(candidates, reference_sets)):
        if len(cand) == 0:
            raise ValueError(f"candidate {i} is empty")
        if len(refs) == 0:
            raise ValueError(f"reference set {i} is empty")
        for ref in refs:
            if len(ref) == 0:
                raise ValueError(f"reference set {i} contains an empty reference")
    if len(reference_sets) < 2:
        warnings.warn(
            "cider over a single-document corpus has degenerate idf "
            "(all idf weights are zero, so every score is 0)",
            stacklevel=2,
        )

    scores = _cider_per_example(candidates, reference_sets, max_n)
    return sum(scores) / len(scores)


def _cider_per_example(
    candidates: Sequence[Tokens],
    reference_sets: Sequence[Sequence[Tokens]],
    max_n: int = 4,
) -> list[float]:
    """Per-example CIDEr scores (the corpus score is their mean)."""
    n_docs = len(reference_sets)
    dfs: list[Counter] = []
    for n in range(1, max_n + 1):
        df: Counter = Counter()
        for refs in reference_sets:
            seen: set[tuple] = set()
            for ref in refs:
                seen.update(ngram_counts(ref, n).keys())
            df.update(seen)
        dfs.append(df)

    def tfidf(tokens: Tokens, n: int, df: Counter) -> dict[tuple, float]:
        return {
            g: tf * math.log(n_docs / max(1.0, df[g]))
            for g, tf in ngram_counts(tokens, n).items()
        }

    def cosine(u: dict[tuple, float], v: dict[tuple, float]) -> float:
        dot = sum(u[g] * v.get(g, 0.0) for g in u)
        nu = math.sqrt(sum(x * x for x in u.values()))
        nv = math.sqrt(sum(x * x for x in v.values()))
        if nu == 0.0 or nv == 0.0:
            return 0.0
        return dot / (nu * nv)

    scores = []
    for cand, refs in zip(candidates, reference_sets):
        per_n = []
        for n in range(1, max_n + 1):
            df = dfs[n - 1]
            cand_vec = tfidf(cand, n, df)
            per_n.append(
                sum(cosine(cand_vec, tfidf(ref, n, df)) for ref in refs) / len(refs)
            )
        scores.append(10.0 * sum(per_n) / max_n)
    return scores


def distinct_n(candidates: Sequence[Tokens], n: int) -> float:
    """Unique n-grams divided by total n-grams across all candidates."""
    if len(candidates) == 0:
        raise ValueError("candidates must be non-empty")
    unique: set[tuple] = set()
    total = 0
    for cand in candidates:
        counts = ngram_counts(cand, n)
        unique.update(counts.keys())
        total += sum(counts.values())
    if total == 0:
        raise ValueError(f"no n-grams of order {n} in any candidate")
    return len(unique) / total


@dataclass(frozen=True)
class MetricsReport:
    """Corpus metric scores plus a per-example score table.

    Corpus BLEU and ROUGE-L are means of per-example scores (BLEU orders
    >= 2 use smoothing so short exact prefixes still register); CIDEr and
    distinct-n are corpus-level by definition.  Examples with an empty
    candidate score 0 on every per-example metric (the strict metric
    functions reject empty input; a report must still cover the example).
    """

    n_examples: int
    bleu_1: float
    bleu_2: float
    bleu_3: float
    bleu_4: float
    rouge_l: float
    cider: float
    distinct_1: float
    distinct_2: float
    per_example: list[dict] = field(repr=False)

    def __post_init__(self) -> None:
        if self.n_examples < 1:
            raise ValueError("report needs at least one example")
        for name in ("bleu_1", "bleu_2", "bleu_3", "bleu_4", "rouge_l",
                     "distinct_1", "distinct_2"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} = {value} outside [0, 1]")
        if not 0.0 <= self.cider <= 10.0:
            raise ValueError(f"cider = {self.cider} outside [0, 10]")
        if len(self.per_example) != self.n_examples:
            raise ValueError(
                f"per_example has {len(self.per_example)} rows, "
                f"expected {self.n_examples}"
            )

    def to_json_dict(self) -> dict:
        return {
            "n_examples": self.n_examples,
            "bleu_1": self.bleu_1,
            "bleu_2": self.bleu_2,
            "bleu_3": self.bleu_3,
            "bleu_4": self.bleu_4,
            "rouge_l": self.rouge_l,
            "cider": self.cider,
            "distinct_1": self.distinct_1,
            "distinct_2": self.distinct_2,
            "per_example": self.per_example,
        }

    PER_EXAMPLE_COLUMNS = (
        "index",
        "candidate_len",
        "bleu_1",
        "bleu_2",
        "bleu_3",
        "bleu_4",
        "rouge_l",
        "cider",
    )


def compute_metrics_report(
    candidates: Sequence[Tokens],
    reference_sets: Sequence[Sequence[Tokens]],
) -> MetricsReport:
    """Score a corpus of candidates and build the full report."""
    if len(candidates) == 0:
        raise ValueError("candidates must be non-empty")
    if len(candidates) != len(reference_sets):
        raise ValueError(
            f"got {len(candidates)} candidates but {len(reference_sets)} reference sets"
        )

    non_empty = [(c, r) for c, r in zip(candidates, reference_sets) if len(c) > 0]
    if non_empty:
        cider_scores = _cider_per_example(
            [c for c, _ in non_empty], [r for _, r in non_empty]
        )
    else:
        cider_scores = []
    cider_iter = iter(cider_scores)

    rows = []
    for i, (cand, refs) in enumerate(zip(candidates, reference_sets)):
        if len(cand) == 0:
            row_scores = {f"bleu_{k}": 0.0 for k in range(1, 5)}
            row_scores["rouge_l"] = 0.0
            row_scores["cider"] = 0.0
        else:
            row_scores = {
                f"bleu_{k}": bleu(cand, refs, max_n=k, smoothing=True)
                for k in range(1, 5)
            }
            row_scores["rouge_l"] = rouge_l(cand, refs)
            row_scores["cider"] = next(cider_iter)
        rows.append({"index": i, "candidate_len": len(cand), **row_scores})

    n = len(rows)
    mean = lambda key: sum(r[key] for r in rows) / n  # noqa: E731

    usable = [c for c in candidates if len(c) > 0]
    if usable:
        try:
            d1 = distinct_n(usable, 1)
        except ValueError:
            d1 = 0.0
        try:
            d2 = distinct_n(usable, 2)
        except ValueError:
            d2 = 0.0
    else:
        d1 = d2 = 0.0

    return MetricsReport(
        n_examples=n,
        bleu_1=mean("bleu_1"),
        bleu_2=mean("bleu_2"),
        bleu_3=mean("bleu_3"),
        bleu_4=mean("bleu_4"),
        rouge_l=mean("rouge_l"),
        cider=mean("cider"),
        distinct_1=d1,
        distinct_2=d2,
        per_example=rows,
    )
