#!/usr/bin/env python3
"""Brute-force reference metrics used to freeze tests/data/metrics_golden.tsv.

Written independently of the C++ sources: n-grams are enumerated by slicing,
LCS by exhaustive memoized recursion.

Usage: metrics_oracle.py > tests/data/metrics_golden.tsv
"""
import math
from functools import lru_cache

EPS = 1e-9


def grams(words, n):
    out = {}
    for i in range(len(words) - n + 1):
        g = tuple(words[i:i + n])
        out[g] = out.get(g, 0) + 1
    return out


def bleu(hyp, refs, max_n=4):
    if not hyp:
        return 0.0
    logs = []
    for n in range(1, max_n + 1):
        h = grams(hyp, n)
        total = sum(h.values())
        if total == 0:
            continue
        match = 0
        for g, c in h.items():
            match += min(c, max(grams(r, n).get(g, 0) for r in refs))
        logs.append(math.log(max(match, EPS) / total))
    lengths = sorted(len(r) for r in refs)
    r = min(lengths, key=lambda x: (abs(x - len(hyp)), x))
    bp = math.exp(1 - r / len(hyp)) if len(hyp) < r else 1.0
    return bp * math.exp(sum(logs) / len(logs))


def corpus_bleu(hyps, refs, max_n=4):
    match = [0] * max_n
    total = [0] * max_n
    for h, r in zip(hyps, refs):
        for n in range(1, max_n + 1):
            hg = grams(h, n)
            rg = grams(r, n)
            total[n - 1] += sum(hg.values())
            match[n - 1] += sum(min(c, rg.get(g, 0)) for g, c in hg.items())
    logs = [math.log(max(m, EPS) / t) for m, t in zip(match, total) if t > 0]
    hl = sum(len(h) for h in hyps)
    rl = sum(len(r) for r in refs)
    bp = math.exp(1 - rl / hl) if hl < rl else 1.0
    return bp * math.exp(sum(logs) / len(logs))


def rouge_l(hyp, ref):
    @lru_cache(maxsize=None)
    def lcs(i, j):
        if i == len(hyp) or j == len(ref):
            return 0
        if hyp[i] == ref[j]:
            return 1 + lcs(i + 1, j + 1)
        return max(lcs(i + 1, j), lcs(i, j + 1))

    m = lcs(0, 0)
    if m == 0:
        return 0.0
    p, r = m / len(hyp), m / len(ref)
    return 2 * p * r / (p + r)


def distinct(texts, n):
    seen, total = set(), 0
    for t in texts:
        for i in range(len(t) - n + 1):
            seen.add(tuple(t[i:i + n]))
            total += 1
    return len(seen) / total if total else 0.0


def diverse4(texts):
    seen = {tuple(t[i:i + 4]) for t in texts for i in range(len(t) - 3)}
    words = sum(len(t) for t in texts)
    return len(seen) / words if seen else 0.0


def self_bleu(texts):
    s = 0.0
    for i, t in enumerate(texts):
        others = [o for j, o in enumerate(texts) if j != i and o]
        if others:
            s += bleu(t, others)
    return s / len(texts)


def w(s):
    return s.split()


def many(s):
    return [w(x) for x in s.split(" | ")]


CASES = [
    ("bleu", "the cat sat on the mat", "the cat sat on the mat"),
    ("bleu", "the the the", "the cat"),
    ("bleu", "the cat sat on a mat today", "the cat sat on the mat"),
    ("bleu", "a cat", "the cat sat on the mat"),
    ("bleu", "one two three four five", "six seven eight nine | one two three x five"),
    ("bleu", "big red dog runs", "a big red dog runs fast | red dog"),
    ("bleu", "x y z", "p q r s"),
    ("rouge_l", "a b c d", "a c d"),
    ("rouge_l", "a b c", "d e f"),
    ("rouge_l", "the quick brown fox jumps", "the brown quick fox leaps over"),
    ("rouge_l", "w x w y w z", "w w w x"),
    ("distinct_1", "a a a", ""),
    ("distinct_2", "a b a b", ""),
    ("distinct_2", "the cat sat | the cat ran | a dog sat", ""),
    ("self_bleu", "the cat sat on the mat | the cat sat on the mat | the cat sat on the mat", ""),
    ("self_bleu", "a b c d e | a b c x y | p q r s t", ""),
    ("diverse_4", "a b c d", ""),
    ("diverse_4", "a b c d | a b c d | a b c d", ""),
    ("diverse_4", "one two three four five six | one two three four seven | three four", ""),
    ("corpus_bleu", "the cat sat | a dog ran fast | hello world", "the cat sat down | the dog ran fast | hello there world"),
]


def value(metric, a, b):
    if metric == "bleu":
        return bleu(w(a), many(b))
    if metric == "rouge_l":
        return rouge_l(w(a), w(b))
    if metric.startswith("distinct_"):
        return distinct(many(a), int(metric.split("_")[1]))
    if metric == "self_bleu":
        return self_bleu(many(a))
    if metric == "diverse_4":
        return diverse4(many(a))
    if metric == "corpus_bleu":
        return corpus_bleu(many(a), many(b))
    raise ValueError(metric)


if __name__ == "__main__":
    print("# metric\targ1\targ2\texpected  (lists separated by ' | ')")
    for metric, a, b in CASES:
        print(f"{metric}\t{a}\t{b}\t{value(metric, a, b)!r}")
