"""Independent brute-force reference implementations used only by the tests."""

import itertools
import math
import re
from collections import Counter


def tokens(text):
    return re.findall(r"[^\W_]+", text.lower())


def bm25(docs, query, k1=1.2, b=0.75):
    """Textbook Okapi BM25 with the Lucene IDF, recomputing every statistic per call."""
    toks = {d: tokens(t) for d, t in docs}
    n = len(toks)
    avgdl = sum(len(t) for t in toks.values()) / n
    out = {}
    for d, words in toks.items():
        total = 0.0
        matched = False
        for term in sorted(set(tokens(query))):
            tf = words.count(term)
            if tf == 0:
                continue
            matched = True
            df = sum(1 for w in toks.values() if term in w)
            idf = math.log(1 + (n - df + 0.5) / (df + 0.5))
            total += idf * tf * (k1 + 1) / (tf + k1 * (1 - b + b * len(words) / avgdl))
        if matched:
            out[d] = total
    return out


def kendall_tau_pairs(a, b):
    """Concordant minus discordant pairs over all pairs, divided by the pair count."""
    pos = {x: i for i, x in enumerate(b)}
    common = [x for x in a if x in pos]
    n = len(common)
    if n < 2:
        return None
    conc = disc = 0
    for i in range(n):
        for j in range(i + 1, n):
            if pos[common[i]] < pos[common[j]]:
                conc += 1
            else:
                disc += 1
    return (conc - disc) / (n * (n - 1) / 2)


def dcg(grades):
    return sum((2 ** g - 1) / math.log2(i + 2) for i, g in enumerate(grades))


def ndcg(ranked, qrels, k):
    """nDCG@k with the ideal DCG found by trying every permutation of the judged documents."""
    actual = dcg([qrels.get(c, 0) for c in ranked[:k]])
    docs = list(qrels)
    best = 0.0
    for perm in itertools.permutations(docs, min(k, len(docs))):
        best = max(best, dcg([qrels[c] for c in perm]))
    return actual / best if best > 0 else 0.0


def mrr(ranked, qrels, k):
    for i, c in enumerate(ranked[:k]):
        if qrels.get(c, 0) > 0:
            return 1.0 / (i + 1)
    return 0.0


def recall(ranked, qrels, k):
    rel = {c for c, g in qrels.items() if g > 0}
    if not rel:
        return 0.0
    return len(rel & set(ranked[:k])) / len(rel)


def macro_f1(preds, golds, classes):
    scores = []
    for c in classes:
        tp = sum(1 for p, g in zip(preds, golds) if p == c and g == c)
        fp = sum(1 for p, g in zip(preds, golds) if p == c and g != c)
        fn = sum(1 for p, g in zip(preds, golds) if p != c and g == c)
        if tp == fp == fn == 0:
            scores.append(1.0)
        else:
            precision = tp / (tp + fp) if tp + fp else 0.0
            rec = tp / (tp + fn) if tp + fn else 0.0
            scores.append(0.0 if precision + rec == 0 else 2 * precision * rec / (precision + rec))
    return sum(scores) / len(scores)


def tfidf_cosine(docs, query):
    """Smoothed-IDF TF-IDF cosine, from scratch."""
    toks = {d: Counter(tokens(t)) for d, t in docs}
    n = len(toks)
    vocab = sorted({t for c in toks.values() for t in c})
    idf = {t: math.log((1 + n) / (1 + sum(1 for c in toks.values() if t in c))) + 1 for t in vocab}

    def vec(counts):
        v = [counts.get(t, 0) * idf[t] for t in vocab]
        norm = math.sqrt(sum(x * x for x in v))
        return [x / norm for x in v] if norm else v

    q = vec(Counter(tokens(query)))
    return {d: sum(a * b for a, b in zip(vec(c), q)) for d, c in toks.items()}
