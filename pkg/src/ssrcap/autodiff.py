"""Tape-based reverse-mode automatic differentiation over numpy arrays.

Operations record themselves on the innermost active :class:`Tape`.  Outside a
tape nothing is recorded and results never require gradients, which is how
reward scoring and decoding stay off the graph.

    with Tape() as tape:
        loss = ad.sum(ad.mul(x, x))
    backward(loss)
"""
import threading

import numpy as np

from . import kernels


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


_local = threading.local()


def _stack():
    st = getattr(_local, "tapes", None)
    if st is None:
        st = _local.tapes = []
    return st


def active_tape():
    st = _stack()
    return st[-1] if st else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_tape", "_leaf")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._tape = None
        self._leaf = True

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _not_scalar(t):
    raise ShapeError(f"tensor of shape {t.shape} is not a scalar")


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


class _Record:
    __slots__ = ("outputs", "inputs", "backward")

    def __init__(self, outputs, inputs, backward):
        self.outputs = outputs
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered log of executed operations for one backward pass."""

    def __init__(self):
        self.records = []

    def __len__(self):
        return len(self.records)

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        st = _stack()
        if st and st[-1] is self:
            st.pop()
        return False


def _emit(out_arrays, inputs, backward_fn):
    """Wrap op outputs and record them when any input needs gradients."""
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    outs = []
    for arr in out_arrays:
        t = Tensor.__new__(Tensor)
        t.data = arr
        t.requires_grad = needs
        t.grad = None
        t.name = None
        t._tape = tape if needs else None
        t._leaf = False
        outs.append(t)
    if needs:
        tape.records.append(_Record(tuple(outs), tuple(inputs), backward_fn))
    return outs


def _one(arr, inputs, backward_fn):
    return _emit((arr,), inputs, lambda gs: backward_fn(gs[0]))[0]


def _check_same(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    _check_same(a, b, "add")
    return _one(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    _check_same(a, b, "sub")
    return _one(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _one(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a, c):
    c = a.data.dtype.type(c)
    return _one(a.data * c, (a,), lambda g: (g * c,))


def sigmoid(a):
    y = kernels._sigmoid(a.data)
    return _one(y, (a,), lambda g: (g * y * (1 - y),))


def tanh(a):
    y = np.tanh(a.data)
    return _one(y, (a,), lambda g: (g * (1 - y * y),))


def exp(a):
    y = np.exp(a.data)
    return _one(y, (a,), lambda g: (g * y,))


def log(a):
    if np.any(a.data <= 0):
        bad = a.data[a.data <= 0].reshape(-1)[0]
        raise DomainError(f"log: operand must be strictly positive (found {bad!r})")
    x = a.data
    return _one(np.log(x), (a,), lambda g: (g / x,))


def relu(a):
    pos = a.data > 0
    return _one(np.where(pos, a.data, 0).astype(a.dtype), (a,), lambda g: (g * pos,))


def hinge_pos(a):
    """max(x, 0) with subgradient 0 at exactly 0."""
    return relu(a)


_UNARY = {"sigmoid": sigmoid, "tanh": tanh, "exp": exp, "log": log, "relu": relu, "hinge_pos": hinge_pos}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(kind, *operands, factor=None):
    if kind in _BINARY:
        if len(operands) != 2:
            raise ShapeError(f"{kind} takes two operands")
        return _BINARY[kind](*operands)
    if kind in _UNARY:
        return _UNARY[kind](operands[0])
    if kind == "scale":
        return scale(operands[0], factor)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def mul_const(a, c):
    """Multiply by a constant array (masks, dropout, detached rewards)."""
    c = np.asarray(c, dtype=a.dtype)
    if c.shape != a.shape:
        raise ShapeError(f"mul_const: shape mismatch {a.shape} vs {c.shape}")
    return _one(a.data * c, (a,), lambda g: (g * c,))


def add_bias(x, b):
    """Row-broadcast add of a bias vector onto a (batch, n) tensor."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias: cannot add {b.shape} to rows of {x.shape}")
    return _one(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0)))


def blend(new, old, mask):
    """mask * new + (1 - mask) * old with a constant (batch,) 0/1 mask."""
    _check_same(new, old, "blend")
    m = np.asarray(mask, dtype=new.dtype).reshape(-1, 1)
    return _one(m * new.data + (1 - m) * old.data, (new, old), lambda g: (g * m, g * (1 - m)))


def dropout(x, p, rng, training=True):
    if not training or p <= 0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1 - p)
    return mul_const(x, keep)


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner extents differ {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _one(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def transpose(a):
    return _one(a.data.T.copy(), (a,), lambda g: (g.T,))


def sum(a):
    shape = a.shape
    return _one(np.asarray(a.data.sum(), dtype=a.dtype), (a,), lambda g: (np.full(shape, g, dtype=a.dtype),))


def mean(a):
    n = a.size
    shape = a.shape
    return _one(np.asarray(a.data.mean(), dtype=a.dtype), (a,), lambda g: (np.full(shape, g / n, dtype=a.dtype),))


def stack(tensors):
    if not tensors:
        raise ShapeError("stack of nothing")
    for t in tensors:
        _check_same(t, tensors[0], "stack")
    out = np.stack([t.data for t in tensors])
    return _one(out, tuple(tensors), lambda g: tuple(g[k] for k in range(len(tensors))))


def gather_rows(table, ids):
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"gather_rows: id out of range [0, {n}): {ids.tolist()}")

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _one(table.data[ids], (table,), bwd)


def pick(x, ids):
    """out[b] = x[b, ids[b]] for a (batch, n) tensor."""
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    B = x.shape[0]
    if x.data.ndim != 2 or ids.shape[0] != B:
        raise ShapeError(f"pick: need (B, n) data and B ids, got {x.shape} and {ids.shape}")
    rows = np.arange(B)

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[rows, ids] = g
        return (gx,)

    return _one(x.data[rows, ids], (x,), bwd)


def log_softmax(x):
    if x.data.ndim not in (1, 2):
        raise ShapeError(f"log_softmax expects rank 1 or 2, got {x.shape}")
    y = kernels.log_softmax_fwd(x.data)
    return _one(y, (x,), lambda g: (kernels.log_softmax_bwd(g, y),))


def l2_normalize(x, eps=1e-12):
    """Row-wise unit normalization, norm floored at eps."""
    d = x.data
    flat = d.ndim == 1
    d2 = d[None, :] if flat else d
    norm = np.sqrt((d2 * d2).sum(axis=1, keepdims=True))
    floored = norm < eps
    den = np.maximum(norm, eps).astype(d.dtype)
    y = d2 / den

    def bwd(g):
        g2 = g[None, :] if flat else g
        proj = (g2 * y).sum(axis=1, keepdims=True)
        gx = np.where(floored, g2 / den, (g2 - y * proj) / den)
        return (gx[0] if flat else gx,)

    return _one(y[0] if flat else y, (x,), bwd)


# ---------------------------------------------------------------------------
# fused recurrent cells and losses


def lstm_cell(gates, c_prev):
    """Gate pre-activations (B, 4H) in i, f, o, g order -> (h, c)."""
    B, H = c_prev.shape
    if gates.shape != (B, 4 * H):
        raise ShapeError(f"lstm_cell: gates {gates.shape} incompatible with state {c_prev.shape}")
    h, c, act, tc = kernels.lstm_cell_fwd(gates.data, c_prev.data)
    cp = c_prev.data

    def bwd(gs):
        dh, dc = gs
        return kernels.lstm_cell_bwd(dh, dc, act, cp, tc)

    return tuple(_emit((h, c), (gates, c_prev), bwd))


def gru_cell(gx, gh, h_prev):
    """Input and recurrent pre-activations (B, 3H) in r, z, n order -> h."""
    B, H = h_prev.shape
    if gx.shape != (B, 3 * H) or gh.shape != (B, 3 * H):
        raise ShapeError(f"gru_cell: {gx.shape}/{gh.shape} incompatible with state {h_prev.shape}")
    h, r, z, n = kernels.gru_cell_fwd(gx.data, gh.data, h_prev.data)
    ghd, hp = gh.data, h_prev.data
    return _one(h, (gx, gh, h_prev), lambda g: kernels.gru_cell_bwd(g, r, z, n, ghd, hp))


def contrastive_hardneg(sim, margin, exclude=None):
    """Sum over the diagonal positives of the hardest-negative hinge, both directions."""
    B = sim.shape[0]
    if sim.data.ndim != 2 or sim.shape[1] != B:
        raise ShapeError(f"contrastive_hardneg expects a square matrix, got {sim.shape}")
    ex = np.zeros((B, B), dtype=bool) if exclude is None else np.asarray(exclude, dtype=bool)
    total, idx_c, idx_i = kernels.hardneg_fwd(sim.data, float(margin), ex)
    dt = sim.dtype
    return _one(np.asarray(total, dtype=dt), (sim,), lambda g: (kernels.hardneg_bwd(g, idx_c, idx_i, B, dt),))


# ---------------------------------------------------------------------------
# backward pass


def backward(loss):
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        outs = rec.outputs
        gout = [grads.pop(id(o), None) for o in outs]
        if all(g is None for g in gout):
            continue
        gout = [np.zeros_like(o.data) if g is None else g for o, g in zip(outs, gout)]
        gin = rec.backward(gout)
        for t, g in zip(rec.inputs, gin):
            if g is None or not t.requires_grad:
                continue
            if t._leaf:
                t.grad = g.astype(t.dtype, copy=True) if t.grad is None else t.grad + g
            else:
                k = id(t)
                prev = grads.get(k)
                grads[k] = g if prev is None else prev + g


def parameter(data, name=None, dtype=np.float32):
    return Tensor(np.array(data, dtype=dtype), requires_grad=True, name=name)


def finite_diff_check(f, x, eps=1e-4):
    """Max relative error between the tape gradient of f at x and central differences.

    ``x`` is a Tensor or a list of Tensors; ``f`` is called with no arguments
    when a list is given (it closes over the tensors) and with ``x`` otherwise.
    """
    params = list(x) if isinstance(x, (list, tuple)) else [x]
    call = (lambda: f()) if isinstance(x, (list, tuple)) else (lambda: f(x))
    for p in params:
        p.requires_grad = True
        p.grad = None
    with Tape():
        out = call()
    backward(out)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = call().item()
            flat[i] = orig - eps
            fm = call().item()
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            den = max(abs(gflat[i]), abs(num), 1e-8)
            worst = max(worst, abs(gflat[i] - num) / den)
    for p in params:
        p.grad = None
    return worst


# ---------------------------------------------------------------------------
# optimization


class Adam:
    """Adam with bias correction; ``step`` clears gradients afterwards."""

    def __init__(self, params, lr=4e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = np.zeros_like(p.data)

    def step(self):
        missing = [p.name or str(i) for i, p in enumerate(self.params) if p.grad is None]
        if missing:
            raise RuntimeError(f"adam_step: missing gradients for {missing}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / c1
            vhat = v / c2
            p.data -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype)
            p.grad = None

    def state_arrays(self):
        return self.m, self.v


def clip_grad_norm(params, max_norm):
    total = float(np.sqrt(np.sum([np.sum(p.grad.astype(np.float64) ** 2) for p in params if p.grad is not None])))
    if total > max_norm:
        f = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= p.grad.dtype.type(f)
    return total
