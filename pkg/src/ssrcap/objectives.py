"""Cross-entropy, self-critical and joint training losses.

Dataset sums are reduced as batch means.  Every self-critical loss recomputes
the sampled sentence's log-probs with a teacher-forced pass on the current
tape; rewards and advantages are numpy constants.
"""
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .seq_models import token_log_probs


@dataclass
class LossWeights:
    alpha: float = 0.05
    beta: float = 0.15
    gamma: float = 1.0

    def __post_init__(self):
        w = (self.alpha, self.beta, self.gamma)
        if min(w) < 0 or max(w) <= 0:
            raise ValueError("loss weights must be non-negative with at least one positive")


def _nll(model, captions, feats, training, rng):
    if not captions:
        raise ValueError("empty batch")
    lp, mask = token_log_probs(model, captions, feats, training, rng)
    B = len(captions)
    return ad.scale(ad.sum(ad.mul_const(lp, mask.T)), -1.0 / B)


def caption_xent_loss(model, feats, captions, training=False, rng=None):
    return _nll(model, captions, feats, training, rng)


def lm_xent_loss(lm, captions, training=False, rng=None):
    return _nll(lm, captions, None, training, rng)


def weighted_log_prob_loss(lp, mask, weights):
    """mean_b −Σ_j weights[b, j]·log P(w_bj); lp is (T, B), weights/mask (B, T)."""
    w = np.asarray(weights, dtype=np.float64) * mask
    B = mask.shape[0]
    return ad.scale(ad.sum(ad.mul_const(lp, w.T)), -1.0 / B)


def _policy_pass(model, feats, sampled, training, rng, precomputed):
    if precomputed is not None:
        return precomputed
    return token_log_probs(model, sampled, feats, training, rng)


def _check_len(name, arr, n):
    if len(arr) != n:
        raise ValueError(f"{name}: {len(arr)} entries for a batch of {n}")


def flc_selfcritical_loss(model, feats, sampled, r_sampled, r_baseline, training=False, rng=None,
                          length_normalize=False, precomputed=None):
    """mean_b −(r_flc(s_s) − r_flc(s_b))·Σ_j log P(w_j | w_<j, v)."""
    B = len(sampled)
    _check_len("r_sampled", r_sampled, B)
    _check_len("r_baseline", r_baseline, B)
    lp, mask = _policy_pass(model, feats, sampled, training, rng, precomputed)
    adv = np.asarray(r_sampled, dtype=np.float64) - np.asarray(r_baseline, dtype=np.float64)
    w = np.repeat(adv[:, None], mask.shape[1], axis=1)
    if length_normalize:
        w = w / mask.sum(axis=1, keepdims=True)
    return weighted_log_prob_loss(lp, mask, w)


def rlv_selfcritical_loss(model, feats, sampled, srlv_sampled, srlv_baseline, crlv, training=False, rng=None,
                          precomputed=None):
    """mean_b −Σ_j (r_srlv(s_s) − r_srlv(s_b) + r_crlv(w_j))·log P(w_j | w_<j, v).

    ``crlv[b]`` holds one value per content token; the EOS position gets 0.
    """
    B = len(sampled)
    for name, arr in (("srlv_sampled", srlv_sampled), ("srlv_baseline", srlv_baseline), ("crlv", crlv)):
        _check_len(name, arr, B)
    lp, mask = _policy_pass(model, feats, sampled, training, rng, precomputed)
    adv = np.asarray(srlv_sampled, dtype=np.float64) - np.asarray(srlv_baseline, dtype=np.float64)
    w = np.repeat(adv[:, None], mask.shape[1], axis=1)
    for b, (cap, r) in enumerate(zip(sampled, crlv)):
        if len(r) != len(cap):
            raise ValueError(f"crlv[{b}] has {len(r)} values for {len(cap)} tokens")
        w[b, : len(r)] += r
    return weighted_log_prob_loss(lp, mask, w)


def joint_loss(weights, l_cap=None, l_flc=None, l_rlv=None):
    """α·L_cap + β·L_flc + γ·L_rlv; components with zero weight may be omitted."""
    terms = []
    for wt, comp in ((weights.alpha, l_cap), (weights.beta, l_flc), (weights.gamma, l_rlv)):
        if comp is None or wt == 0:
            continue
        terms.append(ad.scale(comp, wt) if isinstance(comp, ad.Tensor) else ad.Tensor(np.float64(wt * comp)))
    if not terms:
        return ad.Tensor(np.float64(0.0))
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total


def cider_selfcritical_loss(model, feats, sampled, baseline, refs, scorer, training=False, rng=None, precomputed=None):
    """Self-critical loss with advantage CIDEr(s_s) − CIDEr(s_b) against pseudo references."""
    if not scorer.fitted:
        raise RuntimeError("CIDEr scorer is not fitted")
    B = len(sampled)
    _check_len("baseline", baseline, B)
    _check_len("refs", refs, B)
    rs = scorer.item_scores(sampled, refs)
    rb = scorer.item_scores(baseline, refs)
    return flc_selfcritical_loss(model, feats, sampled, rs, rb, training, rng, precomputed=precomputed)
