"""Multi-level visual-semantic embedding: image-sentence and image-concept matching."""
import logging

import numpy as np

from . import autodiff as ad
from . import kernels
from .seq_models import GRUParams, Module, _uniform, gru_step
from .vocab import PAD

log = logging.getLogger(__name__)

MARGIN = 0.2


class ImageEncoder(Module):
    def __init__(self, feat_dim, joint_dim, seed=0, dtype=np.float32):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.feat_dim = feat_dim
        self.dtype = np.dtype(dtype)
        self.W = self._add("W", _uniform(rng, (feat_dim, joint_dim), dtype))
        self.b = self._add("b", np.zeros(joint_dim, dtype=dtype))

    def __call__(self, feats):
        v = np.asarray(feats, dtype=self.dtype)
        if v.ndim == 1:
            v = v[None, :]
        if v.shape[1] != self.feat_dim:
            raise ad.ShapeError(f"image feature dim {v.shape[1]} != {self.feat_dim}")
        return ad.l2_normalize(ad.add_bias(ad.matmul(ad.Tensor(v, dtype=self.dtype), self.W), self.b))


class SentenceEncoder(Module):
    """Bidirectional GRU; final states averaged, projected when sizes differ, normalized."""

    def __init__(self, vocab_size, embed_dim, hidden_dim, joint_dim, seed=0, dtype=np.float32, dropout=0.3):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.dtype = np.dtype(dtype)
        self.hidden_dim = hidden_dim
        self.dropout = dropout
        self.embed = self._add("embed", _uniform(rng, (vocab_size, embed_dim), dtype))
        self.fwd = GRUParams(self, "gru_f", embed_dim, hidden_dim, rng, dtype)
        self.bwd = GRUParams(self, "gru_b", embed_dim, hidden_dim, rng, dtype)
        self.proj = None
        if joint_dim != hidden_dim:
            self.proj = self._add("proj", _uniform(rng, (hidden_dim, joint_dim), dtype))

    def _run(self, gru, ids, mask, training, rng):
        B, T = ids.shape
        h = ad.Tensor(np.zeros((B, self.hidden_dim), dtype=self.dtype))
        for t in range(T):
            x = ad.dropout(ad.gather_rows(self.embed, ids[:, t]), self.dropout, rng, training)
            h = ad.blend(gru_step(gru, x, h), h, mask[:, t])
        return h

    def __call__(self, captions, training=False, rng=None):
        if not captions or any(len(c) == 0 for c in captions):
            raise ValueError("sentence encoder needs non-empty captions")
        B = len(captions)
        T = max(len(c) for c in captions)
        ids = np.full((B, T), PAD, dtype=np.int64)
        rev = np.full((B, T), PAD, dtype=np.int64)
        mask = np.zeros((B, T))
        for b, c in enumerate(captions):
            ids[b, : len(c)] = c
            rev[b, : len(c)] = c[::-1]
            mask[b, : len(c)] = 1.0
        hf = self._run(self.fwd, ids, mask, training, rng)
        hb = self._run(self.bwd, rev, mask, training, rng)
        out = ad.scale(ad.add(hf, hb), 0.5)
        if self.proj is not None:
            out = ad.matmul(out, self.proj)
        return ad.l2_normalize(out)


class ConceptEmbedding(Module):
    def __init__(self, n_concepts, joint_dim, seed=0, dtype=np.float32):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.table = self._add("table", _uniform(rng, (n_concepts, joint_dim), dtype))

    def __call__(self, concept_ids):
        return ad.l2_normalize(ad.gather_rows(self.table, concept_ids))

    def all_normalized(self):
        t = self.table.data
        return t / np.maximum(np.linalg.norm(t, axis=1, keepdims=True), 1e-12)


class ConceptVocabulary:
    """Concept tokens with occurrence counts and relative-frequency priors."""

    def __init__(self, tokens, counts):
        if len(tokens) != len(counts) or len(set(tokens)) != len(tokens):
            raise ValueError("concept tokens must be unique and aligned with counts")
        if any(c < 1 for c in counts):
            raise ValueError("every concept needs at least one occurrence")
        self.tokens = list(tokens)
        self.counts = [int(c) for c in counts]
        total = float(sum(self.counts))
        self.prior = np.array([c / total for c in self.counts])
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    def __eq__(self, other):
        return isinstance(other, ConceptVocabulary) and self.tokens == other.tokens and self.counts == other.counts

    @classmethod
    def from_captions(cls, concept_lists):
        counts = {}
        for cl in concept_lists:
            for w in cl:
                counts[w] = counts.get(w, 0) + 1
        tokens = sorted(counts)
        return cls(tokens, [counts[t] for t in tokens])

    def write(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for t, c, p in zip(self.tokens, self.counts, self.prior):
                fh.write(f"{t}\t{c}\t{p!r}\n")

    @classmethod
    def read(cls, path):
        tokens, counts = [], []
        with open(path, encoding="utf-8") as fh:
            for n, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                parts = line.rstrip("\n").split("\t")
                if len(parts) != 3:
                    raise ValueError(f"{path}:{n}: expected token, count, prior")
                tokens.append(parts[0])
                counts.append(int(parts[1]))
        return cls(tokens, counts)


# ---------------------------------------------------------------------------
# scoring helpers (evaluation mode, never on a tape)


def embed_image(enc, v):
    return enc(v).data[0]


def embed_sentence(enc, caption):
    return enc([list(caption)]).data[0]


def embed_concept(emb, concept_id):
    return emb([concept_id]).data[0]


def cosine_sim(a, b):
    return float(np.dot(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)))


def contrastive_loss(img_emb, part_emb, margin=MARGIN, exclude=None):
    """Hardest-negative hinge in both directions, summed over the batch."""
    if img_emb.shape != part_emb.shape:
        raise ad.ShapeError(f"embedding batches differ: {img_emb.shape} vs {part_emb.shape}")
    sim = ad.matmul(img_emb, ad.transpose(part_emb))
    return ad.contrastive_hardneg(sim, margin, exclude)


def known_positive_mask(image_keys, partner_keys, positives):
    """exclude[i, j] is True when (image i, partner j) is itself a known pair."""
    B = len(image_keys)
    ex = np.zeros((B, B), dtype=bool)
    for i in range(B):
        for j in range(B):
            ex[i, j] = (image_keys[i], partner_keys[j]) in positives
    return ex


def recall_at_k(sim, gold, k):
    sim = np.asarray(sim, dtype=np.float64)
    gold = np.asarray(gold, dtype=np.int64)
    if k < 1 or k > sim.shape[1]:
        raise ValueError(f"k={k} outside [1, {sim.shape[1]}]")
    if gold.min() < 0 or gold.max() >= sim.shape[1]:
        raise ValueError("gold index out of range")
    return float(np.mean(kernels.gold_ranks(np.ascontiguousarray(sim), gold) < k))


# ---------------------------------------------------------------------------
# training


class VSEBundle:
    """The two matching models: (img_sent, sent_enc) and (img_concept, concept_emb)."""

    def __init__(self, img_sent, sent_enc, img_concept, concept_emb, concepts):
        self.img_sent = img_sent
        self.sent_enc = sent_enc
        self.img_concept = img_concept
        self.concept_emb = concept_emb
        self.concepts = concepts

    def modules(self):
        return {
            "vse_img_sent": self.img_sent,
            "vse_sent": self.sent_enc,
            "vse_img_concept": self.img_concept,
            "vse_concept": self.concept_emb,
        }

    def freeze(self):
        for m in self.modules().values():
            m.freeze()


def build_vse(vocab_size, concepts, cfg, seed):
    dt = np.float32
    return VSEBundle(
        ImageEncoder(cfg.feat_dim, cfg.joint_dim_sentence, seed=seed + 11, dtype=dt),
        SentenceEncoder(
            vocab_size, cfg.embed_dim, cfg.gru_hidden, cfg.joint_dim_sentence, seed=seed + 12, dtype=dt, dropout=cfg.dropout
        ),
        ImageEncoder(cfg.feat_dim, cfg.joint_dim_concept, seed=seed + 13, dtype=dt),
        ConceptEmbedding(len(concepts), cfg.joint_dim_concept, seed=seed + 14, dtype=dt),
        concepts,
    )


def _sentence_batches(items, bs, rng):
    order = rng.permutation(len(items)) if rng is not None else np.arange(len(items))
    for s in range(0, len(order), bs):
        yield [items[k] for k in order[s : s + bs]]


def _sentence_loss(bundle, batch, positives, margin, training, rng):
    keys = [it[0] for it in batch]
    caps = [it[2] for it in batch]
    ex = known_positive_mask(keys, [tuple(c) for c in caps], positives)
    vi = bundle.img_sent(np.stack([it[1] for it in batch]))
    vc = bundle.sent_enc(caps, training=training, rng=rng)
    return contrastive_loss(vi, vc, margin, ex)


def _concept_loss(bundle, batch, positives, margin):
    keys = [it[0] for it in batch]
    cids = [it[2] for it in batch]
    ex = known_positive_mask(keys, cids, positives)
    vi = bundle.img_concept(np.stack([it[1] for it in batch]))
    vw = bundle.concept_emb(cids)
    return contrastive_loss(vi, vw, margin, ex)


def _heldout(loss_fn, items, bs):
    if not items:
        return 0.0
    total = 0.0
    for s in range(0, len(items), bs):
        total += loss_fn(items[s : s + bs]).item()
    return total / len(items)


def _fit(name, params, loss_fn, train_items, val_items, cfg, rng):
    opt = ad.Adam(params, lr=cfg.lr_vse)
    best = _heldout(lambda b: loss_fn(b, False), val_items, cfg.batch_pretrain)
    best_state = [p.data.copy() for p in params]
    history = [best]
    stale = 0
    for epoch in range(cfg.vse_epochs):
        for batch in _sentence_batches(train_items, cfg.batch_pretrain, rng):
            opt.zero_grad()
            with ad.Tape():
                loss = loss_fn(batch, True)
            ad.backward(loss)
            opt.step()
        val = _heldout(lambda b: loss_fn(b, False), val_items, cfg.batch_pretrain)
        history.append(val)
        log.info("%s epoch %d held-out loss %.5f", name, epoch + 1, val)
        if val < best - 1e-6:
            best, stale = val, 0
            best_state = [p.data.copy() for p in params]
        else:
            stale += 1
            if stale >= cfg.vse_patience:
                break
    for p, d in zip(params, best_state):
        p.data = d
    return history


def train_vse(train_pairs, val_pairs, concepts, vocab_size, cfg, seed=0):
    """Pre-train both matching models on pseudo pairs.

    ``train_pairs``/``val_pairs`` hold ``(image_key, feature, caption_ids, concept_tokens)``.
    Returns the bundle and the held-out loss histories of both models.
    """
    if not train_pairs:
        raise ValueError("train_vse needs a non-empty dataset")
    bundle = build_vse(vocab_size, concepts, cfg, seed)
    rng = np.random.default_rng(seed + 101)

    def sent_items(pairs):
        return [(k, f, list(c)) for k, f, c, _ in pairs]

    def concept_items(pairs):
        return [(k, f, concepts.index[w]) for k, f, _, cl in pairs for w in cl if w in concepts]

    tr_s, va_s = sent_items(train_pairs), sent_items(val_pairs)
    pos_s = {(k, tuple(c)) for k, _, c in tr_s + va_s}
    tr_c, va_c = concept_items(train_pairs), concept_items(val_pairs)
    pos_c = {(k, c) for k, _, c in tr_c + va_c}

    sent_params = bundle.img_sent.parameters() + bundle.sent_enc.parameters()
    hist_s = _fit(
        "vse-sentence",
        sent_params,
        lambda b, tr: _sentence_loss(bundle, b, pos_s, cfg.margin, tr, rng),
        tr_s,
        va_s,
        cfg,
        rng,
    )
    concept_params = bundle.img_concept.parameters() + bundle.concept_emb.parameters()
    hist_c = _fit(
        "vse-concept",
        concept_params,
        lambda b, tr: _concept_loss(bundle, b, pos_c, cfg.margin),
        tr_c,
        va_c,
        cfg,
        rng,
    )
    bundle.freeze()
    return bundle, {"sentence": hist_s, "concept": hist_c}


def image_sentence_sims(bundle, feats, captions):
    vi = bundle.img_sent(np.asarray(feats)).data.astype(np.float64)
    vc = bundle.sent_enc([list(c) for c in captions]).data.astype(np.float64)
    return vi @ vc.T


def image_concept_sims(bundle, feats):
    vi = bundle.img_concept(np.asarray(feats)).data.astype(np.float64)
    return vi @ bundle.concept_emb.all_normalized().astype(np.float64).T
