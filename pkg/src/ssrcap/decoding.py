"""Monte-Carlo sampling, greedy decoding and beam search for the captioner.

All decoders run in evaluation mode outside any tape.  A decode of ``max_len``
allows at most ``max_len`` content tokens; the step after that may only emit
EOS, and EOS is never allowed as the first token, so every result holds
1..max_len tokens and its score includes the EOS term.
"""
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import kernels
from .vocab import BOS, EOS, PAD

NEG = -np.inf


@dataclass
class Decoded:
    tokens: list
    step_log_probs: list = field(default_factory=list)

    @property
    def log_prob(self):
        return float(np.sum(self.step_log_probs))


def _restrict(logp, t, max_len):
    """float64 copy of step log-probs with disallowed tokens at -inf."""
    lp = logp.astype(np.float64)
    lp[:, PAD] = NEG
    lp[:, BOS] = NEG
    if t == 0:
        lp[:, EOS] = NEG
    if t == max_len:
        keep = lp[:, EOS].copy()
        lp[:] = NEG
        lp[:, EOS] = keep
    return lp


def _check_max_len(max_len):
    if max_len < 1:
        raise ValueError("max_len must be at least 1")


def _run(model, feats, max_len, choose):
    _check_max_len(max_len)
    feats = np.atleast_2d(np.asarray(feats))
    B = feats.shape[0]
    state = model.init_state(feats)
    prev = np.full(B, BOS, dtype=np.int64)
    done = np.zeros(B, dtype=bool)
    toks = [[] for _ in range(B)]
    lps = [[] for _ in range(B)]
    for t in range(max_len + 1):
        state, logp = model.step(state, prev)
        lp = _restrict(logp.data, t, max_len)
        nxt = choose(lp, t)
        for b in range(B):
            if done[b]:
                continue
            w = int(nxt[b])
            lps[b].append(float(lp[b, w]))
            if w == EOS:
                done[b] = True
            else:
                toks[b].append(w)
        if done.all():
            break
        prev = np.where(done, PAD, nxt)
    return [Decoded(t, l) for t, l in zip(toks, lps)]


def greedy_batch(model, feats, max_len):
    # np.argmax returns the lowest index among ties
    return _run(model, feats, max_len, lambda lp, t: np.argmax(lp, axis=1))


def sample_batch(model, feats, max_len, rngs):
    """One categorical draw per image per step, each image using its own rng."""

    def choose(lp, t):
        u = np.array([r.random() for r in rngs])
        m = lp.max(axis=1, keepdims=True)
        probs = np.exp(lp - m)
        return kernels.sample_rows(np.ascontiguousarray(probs), u)

    return _run(model, feats, max_len, choose)


def greedy_decode(model, feat, max_len):
    return greedy_batch(model, np.asarray(feat)[None, :], max_len)[0]


def sample_sentence(model, feat, max_len, rng):
    return sample_batch(model, np.asarray(feat)[None, :], max_len, [rng])[0]


@dataclass
class BeamHypothesis:
    tokens: tuple
    log_prob: float
    state_index: int
    finished: bool = False
    step_log_probs: tuple = ()


def _key(h):
    return (-h.log_prob, h.tokens)


def beam_search(model, feat, beam=10, max_len=16):
    """Highest summed log-prob finished hypothesis; no length penalty."""
    if beam < 1:
        raise ValueError("beam must be >= 1")
    _check_max_len(max_len)
    state = model.init_state(np.asarray(feat)[None, :])
    alive = [BeamHypothesis((), 0.0, 0)]
    finished = []
    prev = np.array([BOS], dtype=np.int64)
    for t in range(max_len + 1):
        state, logp = model.step(state, prev)
        lp = _restrict(logp.data, t, max_len)
        cands = []
        for h in alive:
            row = lp[h.state_index]
            order = np.argsort(-row, kind="stable")[:beam]
            for w in order:
                s = row[w]
                if s == NEG:
                    break
                cands.append(
                    BeamHypothesis(h.tokens + (int(w),), h.log_prob + float(s), h.state_index, False, h.step_log_probs + (float(s),))
                )
        cands.sort(key=_key)
        alive = []
        for c in cands[:beam]:
            if c.tokens[-1] == EOS:
                c.tokens = c.tokens[:-1]
                c.finished = True
                finished.append(c)
            else:
                alive.append(c)
        if not alive:
            break
        if finished:
            best_done = max(f.log_prob for f in finished)
            if max(a.log_prob for a in alive) < best_done:
                break
        idx = np.array([a.state_index for a in alive])
        state = (_take(state[0], idx), _take(state[1], idx))
        for k, a in enumerate(alive):
            a.state_index = k
        prev = np.array([a.tokens[-1] for a in alive], dtype=np.int64)
    pool = finished if finished else alive
    best = min(pool, key=_key)
    return Decoded(list(best.tokens), list(best.step_log_probs))


def _take(t, idx):
    return ad.Tensor(t.data[idx], dtype=t.dtype)


def exhaustive_search(model, feat, max_len):
    """Brute-force optimum over every allowed sequence (tiny models only)."""
    best = None
    V = model.vocab_size

    def rec(prefix, score, state, t):
        nonlocal best
        s2, logp = model.step(state, np.array([prefix[-1] if prefix else BOS]))
        lp = _restrict(logp.data, t, max_len)[0]
        for w in range(V):
            if lp[w] == NEG:
                continue
            sc = score + float(lp[w])
            if w == EOS:
                cand = (-sc, tuple(prefix))
                if best is None or cand < best:
                    best = cand
            else:
                rec(prefix + [w], sc, s2, t + 1)

    rec([], 0.0, model.init_state(np.asarray(feat)[None, :]), 0)
    return list(best[1]), -best[0]
