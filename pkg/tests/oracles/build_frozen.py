"""Independent oracles for the frozen expected values in frozen.json.

Nothing here imports ssrcap.  Every value is computed from first principles
(hand formulas, brute-force enumeration, pure-python loops) and written once;
the test suite compares the implementation against the stored numbers.

    python tests/oracles/build_frozen.py
"""
import json
import math
import os
from collections import Counter
from itertools import product

import numpy as np

HERE = os.path.dirname(os.path.abspath(__file__))


def sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


# ---------------------------------------------------------------------------
# tensor ops


def matmul_hand():
    a = [[1, 2], [3, 4]]
    b = [[5, 6], [7, 8]]
    return [[sum(a[i][k] * b[k][j] for k in range(2)) for j in range(2)] for i in range(2)]


def log_softmax_hand(xs):
    z = sum(math.exp(x) for x in xs)
    return [x - math.log(z) for x in xs]


def lstm_scalar(x, h, c, w):
    """1-unit LSTM, gates i, f, o, g; w maps gate -> (wx, wh, b)."""
    pre = {k: w[k][0] * x + w[k][1] * h + w[k][2] for k in "ifog"}
    i, f, o = sigmoid(pre["i"]), sigmoid(pre["f"]), sigmoid(pre["o"])
    g = math.tanh(pre["g"])
    c2 = f * c + i * g
    return o * math.tanh(c2), c2


LSTM_W = {"i": (0.5, -0.3, 0.1), "f": (-0.2, 0.4, 0.3), "o": (0.7, 0.2, -0.1), "g": (0.3, -0.6, 0.05)}


def gru_scalar(x, h, w):
    """1-unit GRU: r, z, n; n = tanh(wx_n x + b_xn + r (wh_n h + b_hn)); h' = (1 - z) n + z h."""
    r = sigmoid(w["r"][0] * x + w["r"][2] + w["r"][1] * h + w["r"][3])
    z = sigmoid(w["z"][0] * x + w["z"][2] + w["z"][1] * h + w["z"][3])
    n = math.tanh(w["n"][0] * x + w["n"][2] + r * (w["n"][1] * h + w["n"][3]))
    return (1 - z) * n + z * h


GRU_W = {"r": (0.4, -0.5, 0.1, 0.05), "z": (-0.3, 0.2, -0.2, 0.1), "n": (0.6, 0.7, 0.0, -0.15)}


def adam_hand(grads, lr=0.1, b1=0.9, b2=0.999, eps=1e-8):
    x, m, v = 0.0, 0.0, 0.0
    out = []
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1 ** t)
        vh = v / (1 - b2 ** t)
        x = x - lr * mh / (math.sqrt(vh) + eps)
        out.append(x)
    return out


# ---------------------------------------------------------------------------
# contrastive loss / retrieval


def contrastive_brute(sim, margin, exclude=None):
    """Sum over positives of the max-violating hinge in both directions (loops only)."""
    n = len(sim)
    total = 0.0
    for k in range(n):
        worst_c = 0.0
        worst_i = 0.0
        for j in range(n):
            if j != k and not (exclude and exclude[k][j]):
                worst_c = max(worst_c, margin + sim[k][j] - sim[k][k])
            if j != k and not (exclude and exclude[j][k]):
                worst_i = max(worst_i, margin + sim[j][k] - sim[k][k])
        total += worst_c + worst_i
    return total


def recall_brute(sim, gold, k):
    hits = 0
    for q, row in enumerate(sim):
        order = sorted(range(len(row)), key=lambda j: (-row[j], j))
        hits += gold[q] in order[:k]
    return hits / len(sim)


# ---------------------------------------------------------------------------
# caption metrics


def grams(toks, n):
    return Counter(tuple(toks[i : i + n]) for i in range(len(toks) - n + 1))


def bleu_brute(hyps, refsets, n):
    clipped = [0] * n
    totals = [0] * n
    hl = rl = 0
    for h, refs in zip(hyps, refsets):
        hl += len(h)
        rl += sorted(refs, key=lambda r: (abs(len(r) - len(h)), len(r)))[0].__len__()
        for k in range(1, n + 1):
            hc = grams(h, k)
            for g, c in hc.items():
                clipped[k - 1] += min(c, max(grams(r, k)[g] for r in refs))
            totals[k - 1] += max(len(h) - k + 1, 0)
    if min(clipped) == 0:
        return 0.0
    p = sum(math.log(c / t) for c, t in zip(clipped, totals)) / n
    bp = 1.0 if hl > rl else math.exp(1 - rl / hl)
    return bp * math.exp(p)


def cider_brute(hyps, refsets):
    """Plain CIDEr: tf-idf n-gram vectors, idf from reference document frequency (floored at 1)."""
    N = len(refsets)

    def df(g):
        return sum(1 for refs in refsets if any(grams(r, len(g))[g] > 0 for r in refs))

    def vec(toks, n):
        return {g: c * (math.log(N) - math.log(max(1, df(g)))) for g, c in grams(toks, n).items()}

    def cos(a, b):
        na = math.sqrt(sum(x * x for x in a.values()))
        nb = math.sqrt(sum(x * x for x in b.values()))
        if na == 0 or nb == 0:
            return 0.0
        return sum(a[g] * b.get(g, 0.0) for g in a) / (na * nb)

    scores = []
    for h, refs in zip(hyps, refsets):
        s = 0.0
        for n in range(1, 5):
            hv = vec(h, n)
            s += sum(cos(hv, vec(r, n)) for r in refs) / len(refs)
        scores.append(10.0 * s / 4)
    return scores


CIDER_CORPUS = {
    "hyps": [["a", "dog", "runs", "in", "the", "park"], ["a", "cat", "sits"], ["two", "birds", "fly", "high"]],
    "refs": [
        [["a", "dog", "runs", "in", "a", "park"], ["the", "dog", "is", "running"]],
        [["a", "cat", "is", "sitting"], ["a", "cat", "sits", "on", "a", "mat"]],
        [["birds", "fly", "in", "the", "sky"], ["two", "birds", "flying"]],
    ],
}

BLEU_CORPORA = [
    {"hyps": [["a", "b", "b"]], "refs": [[["a", "b", "c"]]], "n": 1},
    {"hyps": [["a", "b", "c", "d"]], "refs": [[["a", "b", "c", "d"]]], "n": 4},
    {"hyps": [["the", "cat", "sat"]], "refs": [[["the", "cat", "sat", "on", "the", "mat", "today", "ok"]]], "n": 1},
    {"hyps": CIDER_CORPUS["hyps"], "refs": CIDER_CORPUS["refs"], "n": 2},
    {"hyps": CIDER_CORPUS["hyps"], "refs": CIDER_CORPUS["refs"], "n": 1},
    {
        "hyps": [["a", "b", "c", "d", "e"], ["x", "y", "z", "w"]],
        "refs": [[["a", "b", "c", "d", "f"], ["a", "b"]], [["x", "y", "z", "w", "v"]]],
        "n": 4,
    },
]


# ---------------------------------------------------------------------------
# losses and rewards by hand


def build():
    rng = np.random.default_rng(20240611)
    out = {}
    out["matmul"] = matmul_hand()
    out["log_softmax_123"] = log_softmax_hand([1.0, 2.0, 3.0])
    c = 0.8
    # zero weights: every gate pre-activation 0
    out["lstm_zero_weights"] = {"c_prev": c, "c": 0.5 * c, "h": 0.5 * math.tanh(0.5 * c)}
    h, c2 = 0.0, 0.0
    steps = []
    for x in (1.0, -0.5, 2.0):
        h, c2 = lstm_scalar(x, h, c2, LSTM_W)
        steps.append([h, c2])
    out["lstm_scalar"] = {"weights": LSTM_W, "inputs": [1.0, -0.5, 2.0], "states": steps}
    h = 0.0
    gsteps = []
    for x in (1.0, -0.5, 2.0):
        h = gru_scalar(x, h, GRU_W)
        gsteps.append(h)
    out["gru_scalar"] = {"weights": GRU_W, "inputs": [1.0, -0.5, 2.0], "states": gsteps}
    out["adam_one_step"] = adam_hand([1.0])[0]
    out["adam_two_steps"] = adam_hand([1.0, 1.0])
    out["adam_varied"] = adam_hand([0.5, -2.0, 1.5])

    sim = [[0.9, 0.8], [0.2, 0.7]]
    out["contrastive_hand"] = {"sim": sim, "margin": 0.2, "loss": contrastive_brute(sim, 0.2)}
    rand_cases = []
    for n in (3, 4, 5):
        s = rng.uniform(-1, 1, size=(n, n)).round(6).tolist()
        ex = (rng.random((n, n)) < 0.2).tolist()
        for k in range(n):
            ex[k][k] = False
        rand_cases.append({"sim": s, "margin": 0.2, "exclude": ex, "loss": contrastive_brute(s, 0.2, ex)})
    out["contrastive_random"] = rand_cases

    r3 = [[0.9, 0.1, 0.2], [0.3, 0.8, 0.1], [0.2, 0.2, 0.4]]
    out["recall"] = {
        "sim": r3,
        "diag_r1": recall_brute(r3, [0, 1, 2], 1),
        "perm_r1": recall_brute(r3, [1, 0, 2], 1),
        "perm_r2": recall_brute(r3, [1, 0, 2], 2),
    }
    out["cosine_45deg"] = 1 / math.sqrt(2)

    out["bleu"] = [dict(c, value=bleu_brute(c["hyps"], c["refs"], c["n"])) for c in BLEU_CORPORA]
    out["cider"] = dict(CIDER_CORPUS, scores=cider_brute(CIDER_CORPUS["hyps"], CIDER_CORPUS["refs"]))

    out["fluency_hand"] = (math.log(0.5) + math.log(0.25)) / 2
    out["crlv_hand"] = 0.6 - 0.5 * 0.2
    # rlv: -(0.1 * -1 + (0.1 + 0.5) * -2)
    out["rlv_hand"] = -((0.1 + 0.0) * -1.0 + (0.1 + 0.5) * -2.0)
    out["flc_hand"] = -(0.5 * -3.0)
    out["joint_hand"] = 0.05 * 2 + 0.15 * 1 + 1.0 * 0.5

    # exhaustive optimum of a toy table-driven decoder: greedy is myopic
    # step-0 probs over {x, y}; step-1 probs over {x, y, EOS} depend on the first token
    p0 = {"x": 0.6, "y": 0.4}
    p1 = {"x": {"x": 0.3, "y": 0.3, "EOS": 0.4}, "y": {"x": 0.0, "y": 0.0, "EOS": 1.0}}
    best = max(((a, b) for a in p0 for b in p1[a] if b == "EOS"), key=lambda s: p0[s[0]] * p1[s[0]][s[1]])
    out["myopic"] = {"p0": p0, "p1": p1, "optimum": best[0], "optimum_logp": math.log(p0[best[0]]) + math.log(p1[best[0]]["EOS"])}

    # policy-gradient direction oracle on a scalar toy: d/dθ [-(a) log softmax(θ)_k]
    th = [0.3, -0.2, 0.5]
    sm = [math.exp(t) for t in th]
    z = sum(sm)
    a, k = 0.7, 2
    out["pg_softmax_grad"] = {"theta": th, "adv": a, "index": k, "grad": [-a * ((1.0 if j == k else 0.0) - sm[j] / z) for j in range(3)]}

    # brevity penalty example: hypothesis 3 tokens, closest reference 8
    out["bleu_bp_direct"] = math.exp(1 - 8 / 3)

    # exhaustive enumeration count sanity for decoding oracles
    out["enum_count_v3_len2"] = sum(1 for L in (1, 2) for _ in product(range(3), repeat=L))
    return out


if __name__ == "__main__":
    with open(os.path.join(HERE, "frozen.json"), "w", encoding="utf-8") as fh:
        json.dump(build(), fh, indent=1, sort_keys=True)
    print("wrote", os.path.join(HERE, "frozen.json"))
