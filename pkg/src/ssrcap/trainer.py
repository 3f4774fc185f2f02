"""End-to-end training: pretraining phases, the self-critical loop, experiments."""
import json
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import checkpoint, decoding, metrics, microworld, objectives, rewards, vse
from .seq_models import Captioner, LanguageModel, token_log_probs
from .vocab import Vocabulary, build_vocab

log = logging.getLogger(__name__)

ABLATIONS = {
    "ablation:none": (),
    "ablation:flc": ("flc",),
    "ablation:flc+srlv": ("flc", "srlv"),
    "ablation:flc+srlv+crlv": ("flc", "srlv", "crlv"),
    "ssr": ("flc", "srlv", "crlv"),
}
TABLE_ORDER = ("baseline", "baseline_plus", "ablation:none", "ablation:flc", "ablation:flc+srlv", "ablation:flc+srlv+crlv", "ssr")


def mode_dirname(mode):
    return mode.replace(":", "_")


# ---------------------------------------------------------------------------
# data


@dataclass
class Item:
    image_id: str
    feature: np.ndarray
    caption: list  # pseudo-target ids
    concepts: list  # pseudo-target concept tokens
    references: list = None  # clean target token lists
    disfluent: bool = False
    irrelevant: bool = False
    gt_concepts: list = None
    ref_ids: list = None


@dataclass
class Prepared:
    world: object
    vocab: Vocabulary
    concepts: vse.ConceptVocabulary
    train: list
    val: list
    test: list
    lm_corpus: list  # id lists


def _items(pairs, vocab):
    out = []
    for p in pairs:
        ids = vocab.encode(p.target)
        if not ids:
            continue
        ref_ids = [tuple(vocab.encode(r)) for r in p.references] if p.references is not None else None
        out.append(Item(p.image.image_id, p.image.feature, ids, p.concepts, p.references, p.disfluent, p.irrelevant,
                        p.image.concepts, ref_ids))
    return out


def make_data(cfg):
    world = microworld.world_from_config(cfg)
    splits = microworld.generate_dataset(world, (cfg.n_train, cfg.n_val, cfg.n_test), cfg.max_len, cfg.pivot_max_len)
    lm = microworld.generate_lm_corpus(world, cfg.n_lm, cfg.max_len)
    return world, splits, lm


def prepare(cfg, world=None, splits=None, lm_corpus=None):
    if splits is None:
        if cfg.data_dir and os.path.exists(os.path.join(cfg.data_dir, "train.jsonl")):
            world, splits, lm_corpus = microworld.read_dataset(cfg.data_dir)
        else:
            world, splits, lm_corpus = make_data(cfg)
    train, val, test = splits
    vocab = build_vocab([p.target for p in train], cfg.vocab_threshold)
    concepts = vse.ConceptVocabulary.from_captions([[w for w in p.concepts if w in vocab] for p in train])
    lm_ids = [ids for ids in (vocab.encode(s) for s in lm_corpus) if ids]
    return Prepared(world, vocab, concepts, _items(train, vocab), _items(val, vocab), _items(test, vocab), lm_ids)


def _batches(n, bs, rng):
    order = rng.permutation(n)
    for s in range(0, n, bs):
        yield order[s : s + bs]


def _feats(items, idx=None):
    sel = items if idx is None else [items[k] for k in idx]
    return np.stack([it.feature for it in sel]).astype(np.float32)


# ---------------------------------------------------------------------------
# pretraining


def pretrain_lm(cfg, corpus, vocab_size, seed=None):
    """Language model trained on a mono-lingual target corpus, then frozen."""
    if not corpus:
        raise ValueError("empty language-model corpus")
    seed = cfg.seed if seed is None else seed
    lm = LanguageModel(vocab_size, cfg.embed_dim, cfg.hidden_dim, seed=seed + 1, dropout=cfg.dropout)
    opt = ad.Adam(lm.parameters(), lr=cfg.lr_lm)
    drop_rng = np.random.default_rng([seed, 21])
    history = []
    for epoch in range(cfg.epochs_lm):
        total, nb = 0.0, 0
        for idx in _batches(len(corpus), cfg.batch_pretrain, np.random.default_rng([seed, 22, epoch])):
            opt.zero_grad()
            with ad.Tape():
                loss = objectives.lm_xent_loss(lm, [corpus[k] for k in idx], True, drop_rng)
            ad.backward(loss)
            opt.step()
            total += loss.item()
            nb += 1
        history.append(total / nb)
        log.info("lm epoch %d loss %.4f", epoch + 1, history[-1])
    lm.freeze()
    return lm, history


def pretrain_vse(cfg, prep, seed=None):
    seed = cfg.seed if seed is None else seed

    def pairs(items):
        return [(it.image_id, it.feature, it.caption, it.concepts) for it in items]

    return vse.train_vse(pairs(prep.train), pairs(prep.val), prep.concepts, len(prep.vocab), cfg, seed)


def new_captioner(cfg, vocab_size, seed):
    return Captioner(vocab_size, cfg.feat_dim, cfg.embed_dim, cfg.hidden_dim, seed=seed + 3, dropout=cfg.dropout)


def _val_xent(cap, items, bs):
    total = 0.0
    for s in range(0, len(items), bs):
        chunk = items[s : s + bs]
        total += objectives.caption_xent_loss(cap, _feats(chunk), [it.caption for it in chunk]).item() * len(chunk)
    return total / len(items)


def pretrain_captioner(cfg, prep, seed=None):
    """Cross-entropy on pseudo pairs; the best held-out checkpoint is the Baseline model."""
    if not prep.train:
        raise ValueError("empty training set")
    seed = cfg.seed if seed is None else seed
    cap = new_captioner(cfg, len(prep.vocab), seed)
    opt = ad.Adam(cap.parameters(), lr=cfg.lr_captioner)
    drop_rng = np.random.default_rng([seed, 31])
    best = _val_xent(cap, prep.val, cfg.batch_pretrain)
    best_state = cap.state_dict()
    history = [{"epoch": 0, "val_loss": best}]
    stale = 0
    for epoch in range(cfg.epochs_captioner):
        total, nb = 0.0, 0
        for idx in _batches(len(prep.train), cfg.batch_pretrain, np.random.default_rng([seed, 32, epoch])):
            opt.zero_grad()
            with ad.Tape():
                loss = objectives.caption_xent_loss(
                    cap, _feats(prep.train, idx), [prep.train[k].caption for k in idx], True, drop_rng
                )
            ad.backward(loss)
            opt.step()
            total += loss.item()
            nb += 1
        val = _val_xent(cap, prep.val, cfg.batch_pretrain)
        history.append({"epoch": epoch + 1, "train_loss": total / nb, "val_loss": val})
        log.info("captioner epoch %d train %.4f val %.4f", epoch + 1, total / nb, val)
        if val < best:
            best, stale = val, 0
            best_state = cap.state_dict()
        else:
            stale += 1
            if stale >= cfg.caption_patience:
                break
    cap.load_state_dict(best_state)
    return cap, history


@dataclass
class Pretrained:
    lm: LanguageModel
    vse: vse.VSEBundle
    captioner_state: dict
    history: dict = field(default_factory=dict)


def pretrain_all(cfg, prep, seed=None):
    seed = cfg.seed if seed is None else seed
    t0 = time.time()
    lm, h_lm = pretrain_lm(cfg, prep.lm_corpus, len(prep.vocab), seed)
    t1 = time.time()
    bundle, h_vse = pretrain_vse(cfg, prep, seed)
    t2 = time.time()
    cap, h_cap = pretrain_captioner(cfg, prep, seed)
    t3 = time.time()
    log.info("pretraining times: lm %.1fs vse %.1fs captioner %.1fs", t1 - t0, t2 - t1, t3 - t2)
    return Pretrained(lm, bundle, cap.state_dict(), {"lm": h_lm, "vse": h_vse, "captioner": h_cap})


def reward_models(cfg, prep, pre):
    return rewards.RewardModels(pre.lm, pre.vse, prep.vocab, cfg.lam)


# ---------------------------------------------------------------------------
# self-critical training


def val_cider(cap, items, cfg, scorer=None):
    if scorer is None:
        scorer = metrics.CiderScorer().fit([it.ref_ids for it in items])
    dec = decoding.greedy_batch(cap, _feats(items), cfg.max_len)
    hyps = [tuple(d.tokens) for d in dec]
    return float(scorer.item_scores(hyps, [it.ref_ids for it in items]).mean()), dec


def rl_weights(cfg, mode):
    if mode == "baseline_plus":
        return objectives.LossWeights(cfg.alpha, 0.0, cfg.gamma)
    comps = ABLATIONS[mode]
    return objectives.LossWeights(cfg.alpha, cfg.beta if "flc" in comps else 0.0, cfg.gamma if "srlv" in comps else 0.0)


def rl_update(cap, opt, cfg, mode, feats, pseudo, sampled, baseline, rm, cider_scorer=None, drop_rng=None,
              training=True):
    """One joint-loss Adam step; returns (loss value, reward stats)."""
    comps = ABLATIONS.get(mode, ())
    weights = rl_weights(cfg, mode)
    K = len(sampled) // len(pseudo)
    feats_s = np.repeat(feats, K, axis=0)
    stats = {}
    r_flc_s = r_flc_b = srlv_s = srlv_b = crlv = None
    if "flc" in comps:
        r_flc_s = rewards.fluency_rewards(rm.lm, sampled)
        r_flc_b = np.repeat(rewards.fluency_rewards(rm.lm, baseline), K)
        stats["r_flc"] = float(r_flc_s.mean())
    if "srlv" in comps:
        srlv_s = rewards.sentence_relevancy_rewards(rm.vse, feats_s, sampled)
        srlv_b = np.repeat(rewards.sentence_relevancy_rewards(rm.vse, feats, baseline), K)
        stats["r_srlv"] = float(srlv_s.mean())
        if "crlv" in comps:
            crlv = rewards.concept_relevancy_rewards(rm, feats_s, sampled)
        else:
            crlv = [np.zeros(len(s)) for s in sampled]
    opt.zero_grad()
    with ad.Tape():
        l_cap = objectives.caption_xent_loss(cap, feats, pseudo, training, drop_rng) if weights.alpha > 0 else None
        l_flc = l_rlv = None
        if weights.beta > 0 or weights.gamma > 0:
            pre = token_log_probs(cap, sampled, feats_s, training, drop_rng)
            if mode == "baseline_plus":
                refs = [[tuple(p)] for p in pseudo for _ in range(K)]
                base_rep = [b for b in baseline for _ in range(K)]
                l_rlv = objectives.cider_selfcritical_loss(cap, feats_s, sampled, base_rep, refs, cider_scorer, precomputed=pre)
            else:
                if weights.beta > 0:
                    l_flc = objectives.flc_selfcritical_loss(
                        cap, feats_s, sampled, r_flc_s, r_flc_b, length_normalize=cfg.length_normalize, precomputed=pre
                    )
                if weights.gamma > 0:
                    l_rlv = objectives.rlv_selfcritical_loss(cap, feats_s, sampled, srlv_s, srlv_b, crlv, precomputed=pre)
        loss = objectives.joint_loss(weights, l_cap, l_flc, l_rlv)
    ad.backward(loss)
    ad.clip_grad_norm(cap.parameters(), cfg.grad_clip)
    opt.step()
    return loss.item(), stats


def _val_rewards(rm, items, dec):
    caps = [d.tokens if d.tokens else [0] for d in dec]
    feats = _feats(items)
    return float(rewards.fluency_rewards(rm.lm, caps).mean()), float(rewards.sentence_relevancy_rewards(rm.vse, feats, caps).mean())


def train_ssr(cfg, prep, pre, mode="ssr", seed=None, log_path=None):
    """Self-critical refinement of the pretrained captioner under ``mode``."""
    if mode == "baseline":
        cap = new_captioner(cfg, len(prep.vocab), cfg.seed if seed is None else seed)
        cap.load_state_dict(pre.captioner_state)
        return cap, []
    if pre.lm is None or pre.vse is None:
        raise ValueError("train_ssr needs the frozen language model and ML-VSE")
    seed = cfg.seed if seed is None else seed
    cap = new_captioner(cfg, len(prep.vocab), seed)
    cap.load_state_dict(pre.captioner_state)
    rm = reward_models(cfg, prep, pre)
    val_scorer = metrics.CiderScorer().fit([it.ref_ids for it in prep.val])
    cider_scorer = None
    if mode == "baseline_plus":
        cider_scorer = metrics.CiderScorer().fit([[tuple(it.caption)] for it in prep.train])
    opt = ad.Adam(cap.parameters(), lr=cfg.lr_rl)
    drop_rng = np.random.default_rng([seed, 41, sum(map(ord, mode))])
    best, dec = val_cider(cap, prep.val, cfg, val_scorer)
    vf, vs = _val_rewards(rm, prep.val, dec)
    best_state = cap.state_dict()
    records = [{"mode": mode, "epoch": 0, "val_cider": best, "val_r_flc": vf, "val_r_srlv": vs}]
    stale = 0
    K = cfg.n_samples
    for epoch in range(cfg.rl_epochs):
        losses = []
        for idx in _batches(len(prep.train), cfg.batch_rl, np.random.default_rng([seed, 42, epoch])):
            feats = _feats(prep.train, idx)
            pseudo = [prep.train[k].caption for k in idx]
            rngs = [np.random.default_rng([seed, 43, epoch, int(k), s]) for k in idx for s in range(K)]
            sampled = [d.tokens for d in decoding.sample_batch(cap, np.repeat(feats, K, axis=0), cfg.max_len, rngs)]
            baseline = [d.tokens for d in decoding.greedy_batch(cap, feats, cfg.max_len)]
            lv, _ = rl_update(cap, opt, cfg, mode, feats, pseudo, sampled, baseline, rm, cider_scorer, drop_rng)
            losses.append(lv)
        score, dec = val_cider(cap, prep.val, cfg, val_scorer)
        vf, vs = _val_rewards(rm, prep.val, dec)
        records.append({"mode": mode, "epoch": epoch + 1, "loss": float(np.mean(losses)), "val_cider": score,
                        "val_r_flc": vf, "val_r_srlv": vs})
        log.info("%s epoch %d loss %.4f val CIDEr %.4f r_flc %.4f r_srlv %.4f", mode, epoch + 1, records[-1]["loss"], score, vf, vs)
        if score > best:
            best, stale = score, 0
            best_state = cap.state_dict()
        else:
            stale += 1
            if stale >= cfg.rl_patience:
                break
    cap.load_state_dict(best_state)
    if log_path:
        with open(log_path, "w", encoding="utf-8") as fh:
            for r in records:
                fh.write(json.dumps(r) + "\n")
    return cap, records


# ---------------------------------------------------------------------------
# evaluation


REPORT_KEYS = ("bleu1", "bleu2", "bleu3", "bleu4", "cider", "mean_r_flc", "mean_r_srlv")


def evaluate_corpus(cap, items, vocab, cfg, rm=None):
    """Beam-search decode the split and score against clean references."""
    if any(it.references is None for it in items):
        raise ValueError("evaluation split lacks clean references")
    dec = [decoding.beam_search(cap, it.feature.astype(np.float32), cfg.beam, cfg.max_len) for it in items]
    hyps = [vocab.decode(d.tokens) for d in dec]
    refs = [it.references for it in items]
    b = metrics.bleu_all(hyps, refs)
    scorer = metrics.CiderScorer().fit(refs)
    c_mean, c_items = metrics.cider(hyps, refs, scorer)
    report = {"bleu1": b[0], "bleu2": b[1], "bleu3": b[2], "bleu4": b[3], "cider": c_mean}
    flc = srlv = None
    if rm is not None:
        caps = [d.tokens for d in dec]
        flc = rewards.fluency_rewards(rm.lm, caps)
        srlv = rewards.sentence_relevancy_rewards(rm.vse, _feats(items), caps)
        report["mean_r_flc"] = float(flc.mean())
        report["mean_r_srlv"] = float(srlv.mean())
    groups = {"clean": [], "disfluent": [], "irrelevant": [], "both": []}
    for it, s in zip(items, c_items):
        key = "both" if it.disfluent and it.irrelevant else "disfluent" if it.disfluent else "irrelevant" if it.irrelevant else "clean"
        groups[key].append(s)
    for k, v in groups.items():
        report[f"n_{k}"] = len(v)
        report[f"cider_{k}"] = float(np.mean(v)) if v else 0.0
    per_item = []
    for k, (it, h, s) in enumerate(zip(items, hyps, c_items)):
        rec = {"image_id": it.image_id, "caption": " ".join(h), "cider": float(s), "log_prob": dec[k].log_prob}
        if flc is not None:
            rec["r_flc"] = float(flc[k])
            rec["r_srlv"] = float(srlv[k])
        per_item.append(rec)
    return report, per_item


def write_report(path, report):
    with open(path, "w", encoding="utf-8") as fh:
        for k, v in report.items():
            fh.write(f"{k}: {v!r}\n")


def write_items(path, items):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in items:
            fh.write(json.dumps(rec) + "\n")


# ---------------------------------------------------------------------------
# persistence of pretrained components


def save_pretrained(ckpt_dir, prep, pre):
    os.makedirs(ckpt_dir, exist_ok=True)
    pre.lm.save(os.path.join(ckpt_dir, "lm.ckpt"))
    for name, mod in pre.vse.modules().items():
        mod.save(os.path.join(ckpt_dir, f"{name}.ckpt"))
    prep.concepts.write(os.path.join(ckpt_dir, "concepts.tsv"))
    with open(os.path.join(ckpt_dir, "vocab.txt"), "w", encoding="utf-8") as fh:
        fh.writelines(prep.vocab.to_lines())
    checkpoint.save(os.path.join(ckpt_dir, "captioner_pretrained.ckpt"), pre.captioner_state)


def load_pretrained(ckpt_dir, prep, cfg):
    lm = LanguageModel(len(prep.vocab), cfg.embed_dim, cfg.hidden_dim, dropout=cfg.dropout).load(os.path.join(ckpt_dir, "lm.ckpt"))
    lm.freeze()
    bundle = vse.build_vse(len(prep.vocab), prep.concepts, cfg, cfg.seed)
    for name, mod in bundle.modules().items():
        mod.load(os.path.join(ckpt_dir, f"{name}.ckpt"))
    bundle.freeze()
    state = checkpoint.load(os.path.join(ckpt_dir, "captioner_pretrained.ckpt"))
    return Pretrained(lm, bundle, state)


# ---------------------------------------------------------------------------
# experiments


def run_mode(cfg, prep, pre, mode, out_dir=None, seed=None):
    mdir = None
    if out_dir:
        mdir = os.path.join(out_dir, "modes", mode_dirname(mode))
        os.makedirs(mdir, exist_ok=True)
    cap, records = train_ssr(cfg, prep, pre, mode, seed, os.path.join(mdir, "log.jsonl") if mdir else None)
    rm = reward_models(cfg, prep, pre)
    report, items = evaluate_corpus(cap, prep.test, prep.vocab, cfg, rm)
    report = {"mode": mode, **report, "rl_epochs": max(0, len(records) - 1)}
    if mdir:
        cap.save(os.path.join(mdir, "captioner.ckpt"))
        write_report(os.path.join(mdir, "report.txt"), report)
        write_items(os.path.join(mdir, "items.jsonl"), items)
    return cap, report, records


def run_experiment(cfg, out_dir=None, prep=None):
    """Shared pretraining, then every requested mode from the same captioner initializer."""
    cfg.validate()
    if prep is None:
        prep = prepare(cfg)
    pre = pretrain_all(cfg, prep)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        save_pretrained(os.path.join(out_dir, "checkpoints"), prep, pre)
    reports = {}
    for mode in cfg.modes:
        _, rep, _ = run_mode(cfg, prep, pre, mode, out_dir)
        reports[mode] = rep
    if out_dir:
        render_report(out_dir)
    return reports, pre, prep


def comparison_rows(reports):
    order = [m for m in TABLE_ORDER if m in reports] + [m for m in reports if m not in TABLE_ORDER]
    return [reports[m] for m in order]


def format_table(rows):
    cols = ("mode",) + REPORT_KEYS
    cells = [list(cols)] + [[str(r.get("mode"))] + [f"{r[k]:.4f}" if k in r else "-" for k in REPORT_KEYS] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(cols))]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths))) for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def render_report(out_dir, modes=None):
    """Collect per-mode reports under ``out_dir/modes`` into a comparison table."""
    mroot = os.path.join(out_dir, "modes")
    found = sorted(os.listdir(mroot)) if os.path.isdir(mroot) else []
    if modes:
        missing = [m for m in modes if mode_dirname(m) not in found or not os.path.exists(os.path.join(mroot, mode_dirname(m), "report.txt"))]
        if missing:
            raise FileNotFoundError(f"missing mode outputs: {', '.join(missing)}")
        found = [mode_dirname(m) for m in modes]
    reports = {}
    for d in found:
        path = os.path.join(mroot, d, "report.txt")
        if os.path.exists(path):
            rep = read_report_with_mode(path)
            reports[rep["mode"]] = rep
    if not reports:
        raise FileNotFoundError(f"no mode reports under {mroot}")
    rows = comparison_rows(reports)
    table = format_table(rows)
    with open(os.path.join(out_dir, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(table)
    with open(os.path.join(out_dir, "report.jsonl"), "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r) + "\n")
    return table, rows


def read_report_with_mode(path):
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            k, v = line.rstrip("\n").split(": ", 1)
            if k == "mode":
                out[k] = v.strip("'\"")
            elif v.lstrip("-").isdigit():
                out[k] = int(v)
            else:
                out[k] = float(v)
    return out
