"""Reference implementation of the corpus metrics, used to freeze golden values.

Run: python3 metrics_oracle.py > ../data/metric_golden.json
Uses exact rational arithmetic where possible and only the standard library.
"""
import json
import math
from collections import Counter
from fractions import Fraction

GROUPS = [
    {
        "candidate": "i think the weather is lovely today .",
        "references": ["i think the weather is quite lovely today ."],
    },
    {
        "candidate": "it was the guitar , of course .",
        "references": [
            "it was the guitar .",
            "the guitar , of course .",
            "i told you , the guitar .",
            "it was my guitar , of course !",
        ],
    },
    {
        "candidate": "no , i prefer the tea .",
        "references": ["yes , i prefer the coffee ."],
    },
    {
        "candidate": "how about a movie",
        "references": ["how about a movie and some dinner ?"],
    },
    {
        "candidate": "the river looks calm and blue .",
        "references": ["we should talk about the bridge later ."],
    },
]


def ngrams(toks, n):
    return [tuple(toks[i:i + n]) for i in range(len(toks) - n + 1)]


def bleu(cands, refsets, n):
    matches = [0] * n
    totals = [0] * n
    c_len = 0
    r_len = 0
    for c, refs in zip(cands, refsets):
        c_len += len(c)
        # closest reference length, shorter on ties
        r_len += min((abs(len(r) - len(c)), len(r)) for r in refs)[1]
        for k in range(1, n + 1):
            cc = Counter(ngrams(c, k))
            best = Counter()
            for r in refs:
                for g, v in Counter(ngrams(r, k)).items():
                    best[g] = max(best[g], v)
            matches[k - 1] += sum(min(v, best[g]) for g, v in cc.items())
            totals[k - 1] += max(len(c) - k + 1, 0)
    if any(t == 0 or m == 0 for m, t in zip(matches, totals)):
        return 0.0
    log_p = sum(math.log(Fraction(m, t)) for m, t in zip(matches, totals)) / n
    bp = 1.0 if c_len > r_len else math.exp(1 - r_len / c_len)
    return 100.0 * bp * math.exp(log_p)


def nist(cands, refsets, n):
    ref_counts = [Counter() for _ in range(n + 1)]
    ref_words = 0
    for refs in refsets:
        for r in refs:
            ref_words += len(r)
            for k in range(1, n + 1):
                ref_counts[k].update(ngrams(r, k))

    def info(g):
        k = len(g)
        num = ref_words if k == 1 else ref_counts[k - 1][g[:-1]]
        return math.log2(num / ref_counts[k][g])

    score = 0.0
    for k in range(1, n + 1):
        gain = 0.0
        total = 0
        for c, refs in zip(cands, refsets):
            cc = Counter(ngrams(c, k))
            best = Counter()
            for r in refs:
                for g, v in Counter(ngrams(r, k)).items():
                    best[g] = max(best[g], v)
            for g, v in cc.items():
                m = min(v, best[g])
                if m:
                    gain += m * info(g)
            total += max(len(c) - k + 1, 0)
        if total:
            score += gain / total
    sys_len = sum(len(c) for c in cands)
    ref_len = sum(sum(len(r) for r in refs) / len(refs) for refs in refsets)
    beta = math.log(0.5) / math.log(1.5) ** 2
    ratio = min(sys_len / ref_len, 1.0)
    bp = math.exp(beta * math.log(ratio) ** 2)
    return score * bp


def distinct(cands, n):
    grams = [g for c in cands for g in ngrams(c, n)]
    return len(set(grams)) / len(grams) if grams else 0.0


def entropy(cands, n):
    counts = Counter(g for c in cands for g in ngrams(c, n))
    total = sum(counts.values())
    return -sum(v / total * math.log(v / total) for v in counts.values())


def main():
    cands = [g["candidate"].split() for g in GROUPS]
    refs = [[r.split() for r in g["references"]] for g in GROUPS]
    out = {
        "groups": GROUPS,
        "bleu_1": bleu(cands, refs, 1),
        "bleu_2": bleu(cands, refs, 2),
        "bleu_3": bleu(cands, refs, 3),
        "bleu_4": bleu(cands, refs, 4),
        "nist_2": nist(cands, refs, 2),
        "nist_4": nist(cands, refs, 4),
        "distinct_1": distinct(cands, 1),
        "distinct_2": distinct(cands, 2),
        "entropy_4": entropy(cands, 4),
    }
    print(json.dumps(out, indent=2))


if __name__ == "__main__":
    main()
