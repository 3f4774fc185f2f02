"""Fluency, sentence-relevancy and concept-relevancy rewards.

Rewards are plain numpy values computed in evaluation mode with no active
tape, so they enter the policy losses as constants.
"""
import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .seq_models import token_log_probs
from .vse import image_concept_sims

LAMBDA = 0.5


@dataclass
class RewardBundle:
    r_flc: float
    r_srlv: float
    r_crlv: np.ndarray  # one entry per content token
    sentence: tuple = ()
    image_id: str = ""


@dataclass
class RewardModels:
    lm: object
    vse: object
    vocab: object
    lam: float = LAMBDA

    def __post_init__(self):
        # captioner-vocabulary id -> concept index (or -1)
        cv = self.vse.concepts
        self.concept_of_id = np.array([cv.index.get(tok, -1) for tok in self.vocab.itos], dtype=np.int64)


class _NoTape:
    """Temporarily hide the active tapes so scoring never records."""

    def __enter__(self):
        self.saved = list(ad._stack())
        ad._stack().clear()

    def __exit__(self, *exc):
        ad._stack().extend(self.saved)
        return False


def fluency_rewards(lm, captions):
    """Mean log-prob per sentence over content tokens plus EOS."""
    if any(len(c) == 0 for c in captions):
        raise ValueError("fluency reward needs non-empty sentences")
    with _NoTape():
        lp, mask = token_log_probs(lm, [list(c) for c in captions])
    lp = lp.data.T.astype(np.float64) * mask
    return lp.sum(axis=1) / mask.sum(axis=1)


def fluency_reward(lm, caption):
    return float(fluency_rewards(lm, [caption])[0])


def sentence_relevancy_rewards(vse, feats, captions):
    with _NoTape():
        vi = vse.img_sent(np.atleast_2d(feats)).data.astype(np.float64)
        vc = vse.sent_enc([list(c) for c in captions]).data.astype(np.float64)
    return np.einsum("ij,ij->i", vi, vc)


def sentence_relevancy_reward(vse, feat, caption):
    return float(sentence_relevancy_rewards(vse, np.asarray(feat)[None, :], [caption])[0])


def concept_relevancy_rewards(models, feats, captions):
    """Per-token δ(w)·(cos(image, concept w) − λ·p(w)) for each caption."""
    with _NoTape():
        sims = image_concept_sims(models.vse, np.atleast_2d(feats))
    prior = models.vse.concepts.prior
    out = []
    for b, cap in enumerate(captions):
        ids = np.asarray(cap, dtype=np.int64)
        cidx = models.concept_of_id[ids]
        r = np.zeros(len(ids))
        hit = cidx >= 0
        r[hit] = sims[b, cidx[hit]] - models.lam * prior[cidx[hit]]
        out.append(r)
    return out


def concept_relevancy_reward(models, feat, token_id):
    return float(concept_relevancy_rewards(models, np.asarray(feat)[None, :], [[token_id]])[0][0])


def score(models, feats, captions, image_ids=None):
    """RewardBundles for a batch of (image, sentence) pairs."""
    feats = np.atleast_2d(feats)
    flc = fluency_rewards(models.lm, captions)
    srlv = sentence_relevancy_rewards(models.vse, feats, captions)
    crlv = concept_relevancy_rewards(models, feats, captions)
    ids = image_ids or [""] * len(captions)
    return [RewardBundle(float(f), float(s), c, tuple(cap), i) for f, s, c, cap, i in zip(flc, srlv, crlv, captions, ids)]


def bundle_rewards(models, feat, s_sampled, s_baseline):
    """All rewards for the sampled sentence; fluency and sentence relevancy for the baseline."""
    feats = np.stack([feat, feat])
    flc = fluency_rewards(models.lm, [s_sampled, s_baseline])
    srlv = sentence_relevancy_rewards(models.vse, feats, [s_sampled, s_baseline])
    crlv = concept_relevancy_rewards(models, feats[:1], [s_sampled])[0]
    samp = RewardBundle(float(flc[0]), float(srlv[0]), crlv, tuple(s_sampled))
    base = RewardBundle(float(flc[1]), float(srlv[1]), np.zeros(0), tuple(s_baseline))
    return samp, base


def crlv_bounds(models):
    return -1.0 - models.lam * float(models.vse.concepts.prior.max()), 1.0


def write_trace(path, bundles, vocab):
    with open(path, "w", encoding="utf-8") as fh:
        for rb in bundles:
            rec = {
                "image_id": rb.image_id,
                "sentence": " ".join(vocab.decode(rb.sentence)),
                "r_flc": rb.r_flc,
                "r_srlv": rb.r_srlv,
                "r_crlv": [float(x) for x in rb.r_crlv],
            }
            fh.write(json.dumps(rec) + "\n")
