"""Small dense-layer substrate with hand-derived backward passes.

Arrays are batched ``(N, C, H, W)``; a single ``(C, H, W)`` image is the
``N = 1`` case.  Every ``forward`` returns ``(output, cache)`` and the
matching ``backward(grad_out, cache)`` returns the input gradient while
accumulating parameter gradients into ``Param.grad``.  Keeping the cache
explicit lets one layer be applied several times inside a single step.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels

LEAKY_SLOPE = 0.2


class ShapeError(ValueError):
    """Operand dimensions do not fit the operation."""


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name):
        super().__init__(f"non-finite gradient in parameter {name!r}")
        self.name = name


class Param:
    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = value
        self.grad = np.zeros_like(value)

    def zero_grad(self):
        self.grad[...] = 0


class Module:
    """Parameter container; parameters are discovered from attributes in definition order."""

    def named_params(self, prefix=""):
        for key, val in vars(self).items():
            yield from _walk(val, prefix + key)

    def params(self):
        return [p for _, p in self.named_params()]

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()

    def astype(self, dtype):
        for p in self.params():
            p.value = p.value.astype(dtype)
            p.grad = np.zeros_like(p.value)
        return self

    def state_dict(self):
        return {name: p.value for name, p in self.named_params()}

    def load_state_dict(self, state):
        mine = dict(self.named_params())
        missing = sorted(set(mine) - set(state))
        if missing:
            raise KeyError(f"missing tensors: {missing}")
        bad = [(k, mine[k].value.shape, state[k].shape) for k in mine
               if mine[k].value.shape != state[k].shape]
        if bad:
            raise ShapeError("shape mismatch: " + ", ".join(f"{k} {a} vs {b}" for k, a, b in bad))
        for k, p in mine.items():
            p.value = np.array(state[k], dtype=p.value.dtype)
            p.grad = np.zeros_like(p.value)


def _walk(val, name):
    if isinstance(val, Param):
        yield name, val
    elif isinstance(val, Module):
        yield from val.named_params(name + ".")
    elif isinstance(val, (list, tuple)):
        for i, item in enumerate(val):
            yield from _walk(item, f"{name}.{i}")


def as_batch(x):
    x = np.asarray(x)
    if x.ndim == 3:
        return x[None]
    if x.ndim != 4:
        raise ShapeError(f"expected (C,H,W) or (N,C,H,W), got shape {x.shape}")
    return x


def kaiming(rng, shape, fan_in, slope=LEAKY_SLOPE, dtype=np.float32):
    std = np.sqrt(2.0 / ((1.0 + slope ** 2) * fan_in))
    return (rng.standard_normal(shape) * std).astype(dtype)


# ---------------------------------------------------------------- convolution

def conv2d_forward(x, weight, bias, stride=1, pad=0):
    """Cross-correlation of ``x`` with ``weight`` (out, in, kh, kw)."""
    squeeze = np.ndim(x) == 3
    x = as_batch(x)
    if stride < 1 or pad < 0:
        raise ValueError(f"stride must be >= 1 and pad >= 0, got {stride}, {pad}")
    n, c, h, w = x.shape
    cout, cin, kh, kw = weight.shape
    if cin != c:
        raise ShapeError(f"weight expects {cin} input channels, input has {c} (input {x.shape}, weight {weight.shape})")
    hp, wp = h + 2 * pad, w + 2 * pad
    if hp < kh or wp < kw:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    cols = kernels.im2col(xp, kh, kw, stride)
    y = np.matmul(weight.reshape(cout, -1), cols).reshape(n, cout, ho, wo)
    if bias is not None:
        y += bias.reshape(1, -1, 1, 1)
    cache = (cols, x.shape, weight, stride, pad, squeeze)
    return (y[0] if squeeze else y), cache


def conv2d_backward(grad_out, cache):
    """Returns ``(grad_in, grad_weight, grad_bias)``."""
    if cache is None:
        raise RuntimeError("conv2d_backward called without a forward cache")
    cols, xshape, weight, stride, pad, squeeze = cache
    g = as_batch(grad_out)
    n, c, h, w = xshape
    cout, cin, kh, kw = weight.shape
    g2 = g.reshape(n, cout, -1)
    gw = np.einsum("nop,nkp->ok", g2, cols, optimize=True).reshape(weight.shape)
    gb = g2.sum(axis=(0, 2))
    gcols = np.matmul(weight.reshape(cout, -1).T, g2)
    gxp = kernels.col2im(gcols, c, h + 2 * pad, w + 2 * pad, kh, kw, stride)
    gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
    return (gx[0] if squeeze else gx), gw, gb


class Conv2d(Module):
    def __init__(self, cin, cout, k, stride=1, pad=0, rng=None, init="kaiming", bias=True):
        if init == "zero":
            w = np.zeros((cout, cin, k, k), np.float32)
        else:
            w = kaiming(rng, (cout, cin, k, k), cin * k * k)
        self.weight = Param(w)
        self.bias = Param(np.zeros(cout, np.float32)) if bias else None
        self.stride, self.pad = stride, pad

    def forward(self, x):
        return conv2d_forward(x, self.weight.value, None if self.bias is None else self.bias.value,
                              self.stride, self.pad)

    def backward(self, g, cache):
        gx, gw, gb = conv2d_backward(g, cache)
        self.weight.grad += gw
        if self.bias is not None:
            self.bias.grad += gb
        return gx


class Linear(Module):
    def __init__(self, din, dout, rng=None, init="kaiming"):
        w = np.zeros((dout, din), np.float32) if init == "zero" else kaiming(rng, (dout, din), din)
        self.weight = Param(w)
        self.bias = Param(np.zeros(dout, np.float32))

    def forward(self, x):
        return x @ self.weight.value.T + self.bias.value, x

    def backward(self, g, x):
        self.weight.grad += g.reshape(-1, g.shape[-1]).T @ x.reshape(-1, x.shape[-1])
        self.bias.grad += g.reshape(-1, g.shape[-1]).sum(axis=0)
        return g @ self.weight.value


# ---------------------------------------------------------------- elementwise

def leaky_relu(x, slope=LEAKY_SLOPE):
    mask = x > 0
    return np.where(mask, x, slope * x), mask


def leaky_relu_backward(g, mask, slope=LEAKY_SLOPE):
    return np.where(mask, g, slope * g)


class ResBlock(Module):
    """``x + conv(lrelu(conv(x) + proj(emb)))``; the embedding term is optional.

    The second conv starts at zero by default so a fresh block is the
    identity and deep stacks do not blow up activations at init.
    """

    def __init__(self, channels, rng, emb_dim=None, branch_init="zero"):
        self.conv1 = Conv2d(channels, channels, 3, pad=1, rng=rng)
        self.conv2 = Conv2d(channels, channels, 3, pad=1, rng=rng, init=branch_init)
        self.emb = Linear(emb_dim, channels, rng) if emb_dim else None

    def forward(self, x, emb=None):
        h, c1 = self.conv1.forward(x)
        ce = None
        if self.emb is not None:
            e, ce = self.emb.forward(emb)
            h = h + e[:, :, None, None]
        a, mask = leaky_relu(h)
        y, c2 = self.conv2.forward(a)
        return x + y, (c1, ce, mask, c2)

    def backward(self, g, cache, return_emb=False):
        c1, ce, mask, c2 = cache
        ga = self.conv2.backward(g, c2)
        gh = leaky_relu_backward(ga, mask)
        g_emb = None
        if ce is not None:
            g_emb = self.emb.backward(gh.sum(axis=(2, 3)), ce)
        gx = g + self.conv1.backward(gh, c1)
        return (gx, g_emb) if return_emb else gx


# ---------------------------------------------------------------- pooling etc.

def gap(x):
    """Global average pool over the two trailing axes."""
    x = np.asarray(x)
    if x.shape[-1] * x.shape[-2] < 1:
        raise ShapeError(f"empty spatial extent {x.shape}")
    return x.mean(axis=(-2, -1))


def gap_backward(g, shape):
    h, w = shape[-2:]
    return np.broadcast_to((g / (h * w))[..., None, None], shape).copy()


def softmax(logits, axis=-1):
    z = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(g, y, axis=-1):
    return y * (g - np.sum(g * y, axis=axis, keepdims=True))


def _pool_matrix(n_in, n_out, dtype):
    m = np.zeros((n_out, n_in), dtype)
    for i in range(n_out):
        lo = (i * n_in) // n_out
        hi = -((-(i + 1) * n_in) // n_out)
        m[i, lo:hi] = 1.0 / (hi - lo)
    return m


def adaptive_avg_pool(x, out_h, out_w):
    """Mean over a near-equal partition of the trailing two axes."""
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"output size must be positive, got {out_h}x{out_w}")
    h, w = x.shape[-2:]
    if out_h > h or out_w > w:
        raise ShapeError(f"cannot pool {h}x{w} up to {out_h}x{out_w}")
    ph = _pool_matrix(h, out_h, x.dtype)
    pw = _pool_matrix(w, out_w, x.dtype)
    return ph @ x @ pw.T


def adaptive_avg_pool_backward(g, in_h, in_w):
    out_h, out_w = g.shape[-2:]
    ph = _pool_matrix(in_h, out_h, g.dtype)
    pw = _pool_matrix(in_w, out_w, g.dtype)
    return ph.T @ g @ pw


def upsample2x(x):
    return x.repeat(2, axis=-2).repeat(2, axis=-1)


def upsample2x_backward(g):
    s = g.shape
    return g.reshape(*s[:-2], s[-2] // 2, 2, s[-1] // 2, 2).sum(axis=(-3, -1))


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    lr: float = 1e-4
    eps: float = 1e-8


def adam_step(param, state, name="param"):
    g = param.grad
    if not np.all(np.isfinite(g)):
        raise NonFiniteGradientError(name)
    if state.m.shape != param.value.shape:
        raise ShapeError(f"{name}: optimizer state {state.m.shape} vs parameter {param.value.shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1 - b1) * g
    state.v *= b2
    state.v += (1 - b2) * g * g
    mhat = state.m / (1 - b1 ** state.step)
    vhat = state.v / (1 - b2 ** state.step)
    param.value -= (state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(param.value.dtype)
    return param, state


class Adam:
    def __init__(self, named_params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.named = list(named_params)
        self.states = [AdamState(np.zeros_like(p.value), np.zeros_like(p.value), 0, beta1, beta2, lr, eps)
                       for _, p in self.named]

    def zero_grad(self):
        for _, p in self.named:
            p.zero_grad()

    def step(self):
        # validate everything first so a bad gradient leaves all parameters untouched
        for name, p in self.named:
            if not np.all(np.isfinite(p.grad)):
                raise NonFiniteGradientError(name)
        for (name, p), s in zip(self.named, self.states):
            adam_step(p, s, name)

    def state_dict(self, prefix):
        out = {}
        for (name, _), s in zip(self.named, self.states):
            out[f"{prefix}.m.{name}"] = s.m
            out[f"{prefix}.v.{name}"] = s.v
        out[f"{prefix}.step"] = np.array([s.step for s in self.states[:1]] or [0], np.float32)
        return out

    def load_state_dict(self, state, prefix):
        step = int(state[f"{prefix}.step"][0])
        for (name, p), s in zip(self.named, self.states):
            s.m = np.array(state[f"{prefix}.m.{name}"], dtype=p.value.dtype)
            s.v = np.array(state[f"{prefix}.v.{name}"], dtype=p.value.dtype)
            s.step = step


# ---------------------------------------------------------------- gradient checking

def numeric_grad(f, arr, eps):
    """Central differences of scalar ``f()`` with respect to every entry of ``arr`` (in place)."""
    grad = np.zeros(arr.shape, np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def max_rel_error(analytic, numeric):
    a = np.asarray(analytic, np.float64)
    n = np.asarray(numeric, np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-12)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def grad_check(layer, x, eps=1e-5, seed=0):
    """Largest relative error between analytic and central-difference gradients.

    The scalar loss is ``sum(r * layer(x))`` for a fixed random ``r``.  The
    layer must already hold double-precision parameters.
    """
    rng = np.random.default_rng(seed)
    x = np.array(x, np.float64)
    y, cache = layer.forward(x)
    r = rng.standard_normal(np.shape(y))

    def loss():
        return float(np.sum(r * layer.forward(x)[0]))

    params = layer.params() if isinstance(layer, Module) else []
    for p in params:
        p.zero_grad()
    gx = layer.backward(r, cache)
    worst = max_rel_error(gx, numeric_grad(loss, x, eps))
    for p in params:
        analytic = p.grad.copy()
        worst = max(worst, max_rel_error(analytic, numeric_grad(loss, p.value, eps)))
    return worst
