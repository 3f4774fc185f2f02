"""Finite-difference gradient suite over every differentiable op and loss.

Each case builds a fresh float64 instance with all extents at most 5 and
returns the worst relative error between tape and central-difference
gradients.
"""
import numpy as np

from . import autodiff as ad
from . import objectives
from .seq_models import Captioner, GRUParams, LanguageModel, LSTMParams, Module, gru_step, lstm_step
from .vse import ConceptEmbedding, ImageEncoder, SentenceEncoder, contrastive_loss

TOLERANCE = 1e-4
F64 = np.float64


def _t(rng, *shape, low=-1.0, high=1.0):
    return ad.Tensor(rng.uniform(low, high, size=shape), requires_grad=True, dtype=F64)


def _unary(fn, low=-1.0, high=1.0):
    def case(rng):
        x = _t(rng, 3, 4, low=low, high=high)
        w = rng.normal(size=(3, 4))
        return ad.finite_diff_check(lambda x: ad.sum(ad.mul_const(fn(x), w)), x)

    return case


def _binary(fn):
    def case(rng):
        a, b = _t(rng, 2, 5), _t(rng, 2, 5)
        w = rng.normal(size=(2, 5))
        return ad.finite_diff_check(lambda: ad.sum(ad.mul_const(fn(a, b), w)), [a, b])

    return case


def _matmul(rng):
    a, b = _t(rng, 3, 4), _t(rng, 4, 2)
    w = rng.normal(size=(3, 2))
    return ad.finite_diff_check(lambda: ad.sum(ad.mul_const(ad.matmul(a, b), w)), [a, b])


def _add_bias(rng):
    x, b = _t(rng, 4, 3), _t(rng, 3)
    w = rng.normal(size=(4, 3))
    return ad.finite_diff_check(lambda: ad.sum(ad.mul_const(ad.add_bias(x, b), w)), [x, b])


def _blend(rng):
    a, b = _t(rng, 4, 3), _t(rng, 4, 3)
    m = np.array([1.0, 0.0, 1.0, 0.0])
    w = rng.normal(size=(4, 3))
    return ad.finite_diff_check(lambda: ad.sum(ad.mul_const(ad.blend(a, b, m), w)), [a, b])


def _dropout(rng):
    x = _t(rng, 3, 5)
    w = rng.normal(size=(3, 5))
    # same mask on every call
    return ad.finite_diff_check(
        lambda x: ad.sum(ad.mul_const(ad.dropout(x, 0.3, np.random.default_rng(7), True), w)), x
    )


def _transpose(rng):
    x = _t(rng, 2, 5)
    w = rng.normal(size=(5, 2))
    return ad.finite_diff_check(lambda x: ad.sum(ad.mul_const(ad.transpose(x), w)), x)


def _mean(rng):
    x = _t(rng, 4, 3)
    return ad.finite_diff_check(lambda x: ad.mean(ad.mul(x, x)), x)


def _stack(rng):
    xs = [_t(rng, 3) for _ in range(4)]
    w = rng.normal(size=(4, 3))
    return ad.finite_diff_check(lambda: ad.sum(ad.mul_const(ad.stack(xs), w)), xs)


def _gather_rows(rng):
    table = _t(rng, 5, 3)
    ids = np.array([4, 1, 1, 0])
    w = rng.normal(size=(4, 3))
    return ad.finite_diff_check(lambda t: ad.sum(ad.mul_const(ad.gather_rows(t, ids), w)), table)


def _pick(rng):
    x = _t(rng, 4, 5)
    ids = np.array([0, 4, 2, 2])
    w = rng.normal(size=4)
    return ad.finite_diff_check(lambda x: ad.sum(ad.mul_const(ad.pick(x, ids), w)), x)


def _log_softmax(rng):
    x = _t(rng, 3, 5, low=-2, high=2)
    w = rng.normal(size=(3, 5))
    return ad.finite_diff_check(lambda x: ad.sum(ad.mul_const(ad.log_softmax(x), w)), x)


def _l2_normalize(rng):
    x = _t(rng, 3, 4)
    w = rng.normal(size=(3, 4))
    return ad.finite_diff_check(lambda x: ad.sum(ad.mul_const(ad.l2_normalize(x), w)), x)


def _lstm_cell(rng):
    gates, c = _t(rng, 2, 12, low=-2, high=2), _t(rng, 2, 3)
    wh, wc = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))

    def f():
        h, c2 = ad.lstm_cell(gates, c)
        return ad.add(ad.sum(ad.mul_const(h, wh)), ad.sum(ad.mul_const(c2, wc)))

    return ad.finite_diff_check(f, [gates, c])


def _gru_cell(rng):
    gx, gh, h = _t(rng, 2, 9, low=-2, high=2), _t(rng, 2, 9, low=-2, high=2), _t(rng, 2, 3)
    w = rng.normal(size=(2, 3))
    return ad.finite_diff_check(lambda: ad.sum(ad.mul_const(ad.gru_cell(gx, gh, h), w)), [gx, gh, h])


def _randomize(module, rng):
    # training-scale init leaves many gradients near 1e-8 where central
    # differences lose their digits to cancellation
    for t in module.params.values():
        t.data[...] = rng.uniform(-0.5, 0.5, size=t.shape)
    return module


class _Cell(Module):
    def __init__(self, kind, rng):
        super().__init__()
        cls = LSTMParams if kind == "lstm" else GRUParams
        self.p = cls(self, kind, 3, 4, rng, F64)
        _randomize(self, rng)


def _lstm_unrolled(rng):
    cell = _Cell("lstm", rng)
    xs = [rng.normal(size=(2, 3)) for _ in range(3)]
    w = rng.normal(size=(2, 4))

    def f():
        h = c = ad.Tensor(np.zeros((2, 4)), dtype=F64)
        for x in xs:
            h, c = lstm_step(cell.p, ad.Tensor(x, dtype=F64), h, c)
        return ad.sum(ad.mul_const(h, w))

    return ad.finite_diff_check(f, cell.parameters())


def _gru_unrolled(rng):
    cell = _Cell("gru", rng)
    xs = [rng.normal(size=(2, 3)) for _ in range(3)]
    w = rng.normal(size=(2, 4))

    def f():
        h = ad.Tensor(np.zeros((2, 4)), dtype=F64)
        for x in xs:
            h = gru_step(cell.p, ad.Tensor(x, dtype=F64), h)
        return ad.sum(ad.mul_const(h, w))

    return ad.finite_diff_check(f, cell.parameters())


def _contrastive(rng):
    # hinge kinks are measure-zero; the instance keeps every margin term well clear of 0
    sim = ad.Tensor(rng.uniform(-1, 1, size=(4, 4)) + 1.5 * np.eye(4) * rng.uniform(0, 1, size=4), requires_grad=True, dtype=F64)
    return ad.finite_diff_check(lambda s: ad.contrastive_hardneg(s, 0.2), sim)


def _tiny_captioner(rng):
    return _randomize(Captioner(5, feat_dim=4, embed_dim=3, hidden_dim=4, dtype=F64, dropout=0.3), rng)


def _captions():
    return [[4, 3], [4]]


def _feats(rng):
    return rng.normal(size=(2, 4))


def _caption_xent(rng):
    cap = _tiny_captioner(rng)
    feats = _feats(rng)
    return ad.finite_diff_check(lambda: objectives.caption_xent_loss(cap, feats, _captions()), cap.parameters())


def _caption_xent_dropout(rng):
    cap = _tiny_captioner(rng)
    feats = _feats(rng)
    return ad.finite_diff_check(
        lambda: objectives.caption_xent_loss(cap, feats, _captions(), True, np.random.default_rng(3)), cap.parameters()
    )


def _lm_xent(rng):
    lm = _randomize(LanguageModel(5, embed_dim=3, hidden_dim=4, dtype=F64), rng)
    return ad.finite_diff_check(lambda: objectives.lm_xent_loss(lm, [[4, 4, 3, 4], [3, 4, 4]]), lm.parameters())


def _flc_selfcritical(rng):
    cap = _tiny_captioner(rng)
    feats = _feats(rng)
    r_s, r_b = rng.normal(size=2), rng.normal(size=2)
    return ad.finite_diff_check(
        lambda: objectives.flc_selfcritical_loss(cap, feats, _captions(), r_s, r_b), cap.parameters()
    )


def _rlv_selfcritical(rng):
    cap = _tiny_captioner(rng)
    feats = _feats(rng)
    s_s, s_b = rng.normal(size=2), rng.normal(size=2)
    crlv = [rng.normal(size=len(c)) for c in _captions()]
    return ad.finite_diff_check(
        lambda: objectives.rlv_selfcritical_loss(cap, feats, _captions(), s_s, s_b, crlv), cap.parameters()
    )


def _joint(rng):
    cap = _tiny_captioner(rng)
    feats = _feats(rng)
    r = [rng.normal(size=2) for _ in range(4)]
    crlv = [rng.normal(size=len(c)) for c in _captions()]
    weights = objectives.LossWeights(0.05, 0.15, 1.0)

    def f():
        return objectives.joint_loss(
            weights,
            objectives.caption_xent_loss(cap, feats, _captions()),
            objectives.flc_selfcritical_loss(cap, feats, _captions(), r[0], r[1]),
            objectives.rlv_selfcritical_loss(cap, feats, _captions(), r[2], r[3], crlv),
        )

    return ad.finite_diff_check(f, cap.parameters())


def _sentence_encoder(rng):
    enc = _randomize(SentenceEncoder(5, 3, 4, 3, dtype=F64), rng)
    w = rng.normal(size=(2, 3))
    return ad.finite_diff_check(lambda: ad.sum(ad.mul_const(enc([[4, 2, 3], [1]]), w)), enc.parameters())


def _image_sentence_contrastive(rng):
    img = _randomize(ImageEncoder(4, 3, dtype=F64), rng)
    enc = _randomize(SentenceEncoder(5, 3, 3, 3, dtype=F64), rng)
    feats = rng.normal(size=(3, 4))
    caps = [[4, 2], [1, 3, 3], [2]]
    return ad.finite_diff_check(
        lambda: contrastive_loss(img(feats), enc(caps), 0.2), img.parameters() + enc.parameters()
    )


def _image_concept_contrastive(rng):
    img = _randomize(ImageEncoder(4, 3, dtype=F64), rng)
    emb = _randomize(ConceptEmbedding(5, 3, dtype=F64), rng)
    feats = rng.normal(size=(3, 4))
    return ad.finite_diff_check(
        lambda: contrastive_loss(img(feats), emb(np.array([0, 3, 4])), 0.2), img.parameters() + emb.parameters()
    )


CASES = {
    "add": _binary(ad.add),
    "sub": _binary(ad.sub),
    "mul": _binary(ad.mul),
    "scale": _unary(lambda x: ad.scale(x, -1.7)),
    "sigmoid": _unary(ad.sigmoid, -3, 3),
    "tanh": _unary(ad.tanh, -2, 2),
    "exp": _unary(ad.exp),
    "log": _unary(ad.log, 0.5, 2.0),
    "relu": _unary(ad.relu),
    "hinge_pos": _unary(ad.hinge_pos),
    "mul_const": _unary(lambda x: ad.mul_const(x, np.arange(12.0).reshape(3, 4))),
    "matmul": _matmul,
    "transpose": _transpose,
    "add_bias": _add_bias,
    "blend": _blend,
    "dropout": _dropout,
    "sum/mean": _mean,
    "stack": _stack,
    "gather_rows": _gather_rows,
    "pick": _pick,
    "log_softmax": _log_softmax,
    "l2_normalize": _l2_normalize,
    "lstm_cell": _lstm_cell,
    "gru_cell": _gru_cell,
    "lstm_unrolled": _lstm_unrolled,
    "gru_unrolled": _gru_unrolled,
    "contrastive_hardneg": _contrastive,
    "sentence_encoder": _sentence_encoder,
    "loss:caption_xent": _caption_xent,
    "loss:caption_xent_dropout": _caption_xent_dropout,
    "loss:lm_xent": _lm_xent,
    "loss:flc_selfcritical": _flc_selfcritical,
    "loss:rlv_selfcritical": _rlv_selfcritical,
    "loss:joint": _joint,
    "loss:image_sentence": _image_sentence_contrastive,
    "loss:image_concept": _image_concept_contrastive,
}


def run_suite(seed=0, names=None):
    """{case name: max relative error}, each case seeded independently."""
    out = {}
    for k, (name, case) in enumerate(CASES.items()):
        if names and name not in names:
            continue
        out[name] = float(case(np.random.default_rng([seed, k])))
    return out
