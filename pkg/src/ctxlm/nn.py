"""Small dense-network kernel with hand-derived backprop.

Everything is float64 numpy. Layers operate on row batches: ``x`` has shape
``(batch, in)`` and a weight ``W`` has shape ``(out, in)``.
"""

import json
from collections import OrderedDict

import numpy as np

from .rng import substream

CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class TrainingError(RuntimeError):
    """Raised when a loss or gradient stops being finite."""


def glorot(rng, shape):
    fan_out, fan_in = shape[0], (shape[1] if len(shape) > 1 else 1)
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=shape)


class ParamStore:
    """Named parameters with same-shape gradient buffers."""

    def __init__(self, seed=0):
        self.seed = seed
        self.params = OrderedDict()
        self.grads = OrderedDict()
        self._rng = substream(seed, "init")

    def add(self, name, shape, init="glorot"):
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        shape = tuple(shape)
        if isinstance(init, str) and init == "glorot":
            value = glorot(self._rng, shape)
        elif isinstance(init, str) and init == "zeros":
            value = np.zeros(shape)
        else:
            value = np.array(init, dtype=np.float64).reshape(shape)
        self.params[name] = value
        self.grads[name] = np.zeros(shape)
        return value

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0.0)

    def zero_params(self):
        for p in self.params.values():
            p.fill(0.0)

    def state(self):
        return {k: v.copy() for k, v in self.params.items()}

    def load_state(self, state):
        for k, v in state.items():
            if self.params[k].shape != v.shape:
                raise ShapeError(f"{k}: checkpoint shape {v.shape} != {self.params[k].shape}")
            self.params[k][...] = v

    def grad_norm(self):
        return float(np.sqrt(sum(float(np.sum(g * g)) for g in self.grads.values())))

    def save(self, path, meta=None):
        arrays = {f"p:{k}": v for k, v in self.params.items()}
        header = {"version": CHECKPOINT_VERSION, "seed": self.seed, "names": list(self.params),
                  "meta": meta or {}}
        arrays["__header__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
        with open(path, "wb") as f:
            np.savez(f, **arrays)


def load_checkpoint(path):
    """Return (header dict, OrderedDict of arrays)."""
    with np.load(path) as data:
        header = json.loads(bytes(data["__header__"]).decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
        arrays = OrderedDict((k, data[f"p:{k}"].copy()) for k in header["names"])
    return header, arrays


# -- layers ---------------------------------------------------------------------

def affine_forward(W, b, x):
    x = np.asarray(x, dtype=np.float64)
    if W.ndim != 2 or b.shape != (W.shape[0],) or x.shape[-1] != W.shape[1]:
        raise ShapeError(f"affine: W {W.shape}, b {b.shape}, x {x.shape} are incompatible")
    return x @ W.T + b, (W, x)


def affine_backward(cache, dy):
    W, x = cache
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    dW = dy2.T @ x2
    db = dy2.sum(axis=0)
    dx = dy @ W
    return dW, db, dx


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def nonlinear_forward(kind, x):
    if kind == "tanh":
        y = np.tanh(x)
    elif kind == "sigmoid":
        y = sigmoid(x)
    else:
        raise ValueError(f"unknown nonlinearity {kind!r}")
    return y, (kind, y)


def nonlinear_backward(cache, dy):
    kind, y = cache
    if kind == "tanh":
        return dy * (1.0 - y * y)
    return dy * y * (1.0 - y)


def log_softmax(logits, axis=-1):
    m = np.max(logits, axis=axis, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def softmax(logits, axis=-1):
    m = np.max(logits, axis=axis, keepdims=True)
    e = np.exp(logits - m)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_xent(logits, target):
    """Cross-entropy of ``softmax(logits)`` against a target distribution.

    Batched rows are summed. Returns (loss, dlogits).
    """
    logits = np.asarray(logits, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if target.shape != logits.shape:
        raise ShapeError(f"target {target.shape} vs logits {logits.shape}")
    if np.any(target < 0) or np.any(np.abs(target.sum(axis=-1) - 1.0) > 1e-9):
        raise ValueError("target must be a distribution (non-negative, summing to 1)")
    logp = log_softmax(logits)
    loss = -float(np.sum(target * logp))
    return loss, np.exp(logp) - target


# -- LSTM ------------------------------------------------------------------------
# gates are stacked [input, forget, output, candidate] along the first axis of W

def lstm_forward(Wx, Wh, b, X, h0, c0, mask=None):
    """Run a cell over ``X`` (T, B, D). Where ``mask[t] == 0`` the state is
    carried through unchanged. Returns (H (T, B, H), (h_T, c_T), cache)."""
    T, B, _ = X.shape
    Hd = Wh.shape[1]
    Hs = np.zeros((T, B, Hd))
    hprev, cprev = h0, c0
    steps = []
    xproj = X @ Wx.T + b
    for t in range(T):
        z = xproj[t] + hprev @ Wh.T
        i = sigmoid(z[:, :Hd])
        f = sigmoid(z[:, Hd:2 * Hd])
        o = sigmoid(z[:, 2 * Hd:3 * Hd])
        g = np.tanh(z[:, 3 * Hd:])
        cn = f * cprev + i * g
        tc = np.tanh(cn)
        hn = o * tc
        if mask is None:
            h, c = hn, cn
        else:
            m = mask[t][:, None]
            h = m * hn + (1.0 - m) * hprev
            c = m * cn + (1.0 - m) * cprev
        steps.append((hprev, cprev, i, f, o, g, tc))
        Hs[t] = h
        hprev, cprev = h, c
    return Hs, (hprev, cprev), (Wx, Wh, X, steps, mask)


def lstm_backward(cache, dH, dhT=None, dcT=None):
    """Backprop through time. Returns (dWx, dWh, db, dX, dh0, dc0)."""
    Wx, Wh, X, steps, mask = cache
    T, B, _ = X.shape
    Hd = Wh.shape[1]
    dWx = np.zeros_like(Wx)
    dWh = np.zeros_like(Wh)
    db = np.zeros(Wx.shape[0])
    dZ = np.zeros((T, B, 4 * Hd))
    dh = np.zeros((B, Hd)) if dhT is None else dhT.copy()
    dc = np.zeros((B, Hd)) if dcT is None else dcT.copy()
    for t in range(T - 1, -1, -1):
        hprev, cprev, i, f, o, g, tc = steps[t]
        dh = dh + dH[t]
        if mask is None:
            dhn, dcn_in = dh, dc
            carry_h = carry_c = 0.0
        else:
            m = mask[t][:, None]
            dhn, dcn_in = m * dh, m * dc
            carry_h, carry_c = (1.0 - m) * dh, (1.0 - m) * dc
        dcn = dcn_in + dhn * o * (1.0 - tc * tc)
        dz = dZ[t]
        dz[:, :Hd] = dcn * g * i * (1.0 - i)
        dz[:, Hd:2 * Hd] = dcn * cprev * f * (1.0 - f)
        dz[:, 2 * Hd:3 * Hd] = dhn * tc * o * (1.0 - o)
        dz[:, 3 * Hd:] = dcn * i * (1.0 - g * g)
        dWh += dz.T @ hprev
        dh = dz @ Wh + carry_h
        dc = dcn * f + carry_c
    dZ2 = dZ.reshape(T * B, -1)
    dWx += dZ2.T @ X.reshape(T * B, -1)
    db += dZ2.sum(axis=0)
    dX = dZ @ Wx
    return dWx, dWh, db, dX, dh, dc


# -- optimizers ------------------------------------------------------------------

def _check_finite(store):
    for k, g in store.grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in parameter {k!r}")


class SGD:
    def __init__(self, lr=0.1):
        self.lr = lr

    def step(self, store):
        _check_finite(store)
        for k, p in store.params.items():
            p -= self.lr * store.grads[k]


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, store):
        _check_finite(store)
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, p in store.params.items():
            g = store.grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(kind, **hyper):
    if kind == "sgd":
        return SGD(**hyper)
    if kind == "adam":
        return Adam(**hyper)
    raise ValueError(f"unknown optimizer {kind!r}")


def optimizer_step(kind, store, state=None, **hyper):
    """One update; ``state`` carries an optimizer across calls."""
    opt = state if state is not None else make_optimizer(kind, **hyper)
    opt.step(store)
    return opt


def clip_grad_norm(store, max_norm):
    norm = store.grad_norm()
    if norm > max_norm:
        scale = max_norm / norm
        for g in store.grads.values():
            g *= scale
    return norm


# -- gradient checking -------------------------------------------------------------

def grad_check(loss_fn, store, eps=1e-5, max_coords=None, seed=0, per_param=False):
    """Compare analytic gradients against central differences.

    ``loss_fn()`` must return the scalar loss and leave analytic gradients in
    ``store.grads``. Error per coordinate is ``|a - n| / max(|n|, floor)``
    with ``floor = 1e-6 * max(1, |loss|)``: central differences of a float64
    loss carry roundoff of roughly ``|loss| * 1e-16 / eps``, so gradients far
    below the floor cannot be resolved. With ``max_coords`` only a seeded
    sample of each parameter is probed.
    """
    store.zero_grad()
    loss0 = loss_fn()
    floor = 1e-6 * max(1.0, abs(loss0))
    analytic = {k: g.copy() for k, g in store.grads.items()}
    rng = np.random.default_rng(seed)
    worst = {}
    for name, p in store.params.items():
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        a_flat = analytic[name].reshape(-1)
        err = 0.0
        for j in idx:
            orig = flat[j]
            flat[j] = orig + eps
            lp = loss_fn()
            flat[j] = orig - eps
            lm = loss_fn()
            flat[j] = orig
            num = (lp - lm) / (2.0 * eps)
            err = max(err, abs(a_flat[j] - num) / max(abs(num), floor))
        worst[name] = err
    store.zero_grad()
    loss_fn()
    total = max(worst.values()) if worst else 0.0
    return (total, worst) if per_param else total
