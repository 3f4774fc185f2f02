"""Recurrent cells, the image captioner and the target-language model."""
import numpy as np

from . import autodiff as ad
from . import checkpoint
from .vocab import BOS, EOS, PAD

MASK_VALUE = -1e9
INIT_SCALE = 0.08


def _uniform(rng, shape, dtype):
    return rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape).astype(dtype)


class Module:
    """Named parameter container; subclasses fill ``self.params``."""

    def __init__(self):
        self.params = {}

    def _add(self, name, arr):
        t = ad.Tensor(arr, requires_grad=True, name=name, dtype=arr.dtype)
        self.params[name] = t
        return t

    def parameters(self):
        return [self.params[k] for k in sorted(self.params)]

    def state_dict(self):
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_state_dict(self, arrays):
        missing = set(self.params) - set(arrays)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, t in self.params.items():
            if arrays[k].shape != t.shape:
                raise ValueError(f"{k}: shape {arrays[k].shape} != {t.shape}")
            t.data = np.array(arrays[k], dtype=t.dtype)

    def save(self, path):
        checkpoint.save(path, self.state_dict())

    def load(self, path):
        self.load_state_dict(checkpoint.load(path))
        return self

    def freeze(self):
        for t in self.params.values():
            t.requires_grad = False

    def unfreeze(self):
        for t in self.params.values():
            t.requires_grad = True


class LSTMParams:
    def __init__(self, module, prefix, input_size, hidden_size, rng, dtype):
        self.hidden_size = hidden_size
        self.Wx = module._add(f"{prefix}.Wx", _uniform(rng, (input_size, 4 * hidden_size), dtype))
        self.Wh = module._add(f"{prefix}.Wh", _uniform(rng, (hidden_size, 4 * hidden_size), dtype))
        self.b = module._add(f"{prefix}.b", np.zeros(4 * hidden_size, dtype=dtype))


class GRUParams:
    def __init__(self, module, prefix, input_size, hidden_size, rng, dtype):
        self.hidden_size = hidden_size
        self.Wx = module._add(f"{prefix}.Wx", _uniform(rng, (input_size, 3 * hidden_size), dtype))
        self.Wh = module._add(f"{prefix}.Wh", _uniform(rng, (hidden_size, 3 * hidden_size), dtype))
        self.bx = module._add(f"{prefix}.bx", np.zeros(3 * hidden_size, dtype=dtype))
        self.bh = module._add(f"{prefix}.bh", np.zeros(3 * hidden_size, dtype=dtype))


def lstm_step(p, x, h_prev, c_prev):
    if x.shape[1] != p.Wx.shape[0] or h_prev.shape[1] != p.hidden_size:
        raise ad.ShapeError(f"lstm_step: input {x.shape} / state {h_prev.shape} do not fit params")
    gates = ad.add_bias(ad.add(ad.matmul(x, p.Wx), ad.matmul(h_prev, p.Wh)), p.b)
    return ad.lstm_cell(gates, c_prev)


def gru_step(p, x, h_prev):
    gx = ad.add_bias(ad.matmul(x, p.Wx), p.bx)
    gh = ad.add_bias(ad.matmul(h_prev, p.Wh), p.bh)
    return ad.gru_cell(gx, gh, h_prev)


class _Decoder(Module):
    def __init__(self, vocab_size, embed_dim, hidden_dim, seed, dtype, dropout):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.vocab_size = vocab_size
        self.hidden_dim = hidden_dim
        self.dtype = np.dtype(dtype)
        self.dropout = dropout
        self.embed = self._add("embed", _uniform(rng, (vocab_size, embed_dim), dtype))
        self.lstm = LSTMParams(self, "lstm", embed_dim, hidden_dim, rng, dtype)
        self.out_W = self._add("out.W", _uniform(rng, (hidden_dim, vocab_size), dtype))
        self.out_b = self._add("out.b", np.zeros(vocab_size, dtype=dtype))
        mask = np.zeros(vocab_size, dtype=dtype)
        mask[[PAD, BOS]] = MASK_VALUE
        self.logit_mask = ad.Tensor(mask, dtype=dtype)

    def set_logit_mask(self, allowed_ids):
        mask = np.full(self.vocab_size, MASK_VALUE, dtype=self.dtype)
        mask[list(allowed_ids)] = 0
        self.logit_mask = ad.Tensor(mask, dtype=self.dtype)

    def step(self, state, token_ids, training=False, rng=None):
        ids = np.asarray(token_ids, dtype=np.int64).reshape(-1)
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise IndexError(f"token id out of range [0, {self.vocab_size}): {ids.tolist()}")
        h, c = state
        x = ad.dropout(ad.gather_rows(self.embed, ids), self.dropout, rng, training)
        h, c = lstm_step(self.lstm, x, h, c)
        hd = ad.dropout(h, self.dropout, rng, training)
        logits = ad.add_bias(ad.add_bias(ad.matmul(hd, self.out_W), self.out_b), self.logit_mask)
        return (h, c), ad.log_softmax(logits)

    def _zeros(self, batch):
        z = np.zeros((batch, self.hidden_dim), dtype=self.dtype)
        return ad.Tensor(z, dtype=self.dtype)


class Captioner(_Decoder):
    """Encoder-decoder captioner: image feature initializes the LSTM hidden state."""

    def __init__(self, vocab_size, feat_dim=32, embed_dim=64, hidden_dim=64, seed=0, dtype=np.float32, dropout=0.3):
        super().__init__(vocab_size, embed_dim, hidden_dim, seed, dtype, dropout)
        rng = np.random.default_rng(seed + 7919)
        self.feat_dim = feat_dim
        self.img_W = self._add("img.W", _uniform(rng, (feat_dim, hidden_dim), dtype))
        self.img_b = self._add("img.b", np.zeros(hidden_dim, dtype=dtype))

    def init_state(self, feats):
        v = np.asarray(feats.data if isinstance(feats, ad.Tensor) else feats, dtype=self.dtype)
        if v.ndim == 1:
            v = v[None, :]
        if v.shape[1] != self.feat_dim:
            raise ad.ShapeError(f"image feature dim {v.shape[1]} != {self.feat_dim}")
        h0 = ad.add_bias(ad.matmul(ad.Tensor(v, dtype=self.dtype), self.img_W), self.img_b)
        return h0, self._zeros(v.shape[0])


class LanguageModel(_Decoder):
    def __init__(self, vocab_size, embed_dim=64, hidden_dim=64, seed=0, dtype=np.float32, dropout=0.3):
        super().__init__(vocab_size, embed_dim, hidden_dim, seed, dtype, dropout)

    def init_state(self, batch):
        return self._zeros(batch), self._zeros(batch)


def teacher_forcing_arrays(captions):
    """(inputs, targets, mask) of shape (B, T) with T = longest caption + 1."""
    if not captions or any(len(c) == 0 for c in captions):
        raise ValueError("captions must be non-empty")
    B = len(captions)
    T = max(len(c) for c in captions) + 1
    inputs = np.full((B, T), PAD, dtype=np.int64)
    targets = np.full((B, T), PAD, dtype=np.int64)
    mask = np.zeros((B, T))
    for b, cap in enumerate(captions):
        n = len(cap)
        inputs[b, 0] = BOS
        inputs[b, 1 : n + 1] = cap
        targets[b, :n] = cap
        targets[b, n] = EOS
        mask[b, : n + 1] = 1.0
    return inputs, targets, mask


def token_log_probs(model, captions, feats=None, training=False, rng=None):
    """Teacher-forced log P(w_j | w_<j[, v]) for every caption position and EOS.

    Returns a (T, B) tensor and the (B, T) 0/1 mask of scored positions.
    """
    inputs, targets, mask = teacher_forcing_arrays(captions)
    B, T = inputs.shape
    state = model.init_state(feats) if isinstance(model, Captioner) else model.init_state(B)
    if isinstance(model, Captioner) and state[0].shape[0] != B:
        raise ad.ShapeError(f"{state[0].shape[0]} image features for {B} captions")
    picks = []
    for t in range(T):
        state, logp = model.step(state, inputs[:, t], training, rng)
        picks.append(ad.pick(logp, targets[:, t]))
    return ad.stack(picks), mask


def sequence_log_prob(model, caption, feat=None):
    """Per-token log-probs (length n + 1, EOS last) of one caption, evaluation mode."""
    if len(caption) == 0:
        raise ValueError("caption must be non-empty")
    lp, _ = token_log_probs(model, [list(caption)], None if feat is None else np.asarray(feat)[None, :])
    return lp.data[:, 0].astype(np.float64)
