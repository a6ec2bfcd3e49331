"""Reverse-mode automatic differentiation over numpy arrays.

A ``Tape`` records primitive operations as they execute; ``Tape.gradients``
replays the records in reverse, accumulating adjoints by addition.  With no
tape active the same primitives run as plain numpy computations, which is the
fast path used for action selection.

Only the primitives this package needs exist: 2-D cross-correlation, affine
maps, relu, index gathers, and the small fused ops used by the Q-learning
loss.  Convolution is im2col plus one GEMM; its backward scatters through the
same column layout.
"""

from __future__ import annotations

import numpy as np

# When enabled, every primitive asserts its output is finite.
DEBUG_CHECKS = False


def enable_debug_checks(flag: bool = True):
    global DEBUG_CHECKS
    DEBUG_CHECKS = flag


_TAPE = None


def tape_active() -> bool:
    return _TAPE is not None


class Tensor:
    """An array plus a flag saying whether gradients should flow to it."""

    __slots__ = ("data", "requires")

    def __init__(self, data, requires: bool = False):
        self.data = np.asarray(data)
        self.requires = requires

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires={self.requires})"


class Parameter:
    """A trainable leaf. Optimizers update ``data`` in place and bump ``version``
    so layers can cache derived arrays keyed on it."""

    def __init__(self, data: np.ndarray, name: str = ""):
        self.tensor = Tensor(np.asarray(data), requires=True)
        self.name = name
        self.grad = None
        self.version = 0

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    def assign(self, values: np.ndarray):
        if values.shape != self.data.shape:
            raise ValueError(f"shape mismatch assigning {self.name}: {values.shape} vs {self.data.shape}")
        self.tensor.data = np.array(values, dtype=self.data.dtype)
        self.version += 1

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        return f"Parameter({self.name or 'unnamed'}, shape={self.data.shape})"


class Tape:
    """Records primitives for one forward pass and differentiates through them."""

    def __init__(self):
        self._records = []  # (output tensor, backward fn)

    def __enter__(self):
        global _TAPE
        if _TAPE is not None:
            raise RuntimeError("tapes do not nest")
        _TAPE = self
        return self

    def __exit__(self, *exc):
        global _TAPE
        _TAPE = None
        return False

    def gradients(self, loss: Tensor, params: list) -> list:
        """Adjoints of a scalar loss for each parameter; also sets ``p.grad``.

        Parameters the loss does not depend on get zero gradients.
        """
        if loss.data.ndim != 0 and loss.data.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
        grads = {id(loss): np.ones_like(loss.data)}
        for out, bw in reversed(self._records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for tensor, contrib in bw(g):
                if not tensor.requires:
                    continue
                held = grads.get(id(tensor))
                grads[id(tensor)] = contrib if held is None else held + contrib
        out = []
        for p in params:
            g = grads.get(id(p.tensor))
            if g is None:
                g = np.zeros_like(p.data)
            if DEBUG_CHECKS:
                assert np.isfinite(g).all(), f"non-finite gradient for {p.name}"
            p.grad = g
            out.append(g)
        return out


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, Parameter):
        return x.tensor
    return Tensor(np.asarray(x))


def _finish(out_data, bw_builder, *inputs) -> Tensor:
    """Wrap a primitive result; record on the active tape if gradients can flow."""
    if DEBUG_CHECKS:
        assert np.isfinite(out_data).all(), "non-finite value in forward pass"
    requires = any(t.requires for t in inputs)
    out = Tensor(out_data, requires=requires)
    if _TAPE is not None and requires:
        _TAPE._records.append((out, bw_builder()))
    return out


# ---------------------------------------------------------------------------
# primitives


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int):
    """Patches of a padded [B,C,H,W] input as a [B*Ho*Wo, C*kh*kw] matrix."""
    b, c, hp, wp = xp.shape
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # [B,C,Ho,Wo,kh,kw]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * kh * kw)
    return np.ascontiguousarray(cols), ho, wo


def conv2d(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of [B,C,H,W] (or [C,H,W]) input with [O,C,kh,kw] kernel.

    Output spatial size is floor((H + 2*padding - k)/stride) + 1 per axis.
    """
    x, w = as_tensor(x), as_tensor(w)
    xd = x.data
    single = xd.ndim == 3
    if single:
        xd = xd[None]
    if xd.ndim != 4 or w.data.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and kernel, got {xd.shape} and {w.data.shape}")
    b, c, h, wdt = xd.shape
    o, ci, kh, kw = w.data.shape
    if ci != c:
        raise ValueError(f"conv2d channel mismatch: input has {c}, kernel expects {ci}")
    if h + 2 * padding < kh or wdt + 2 * padding < kw:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}")
    if stride < 1 or padding < 0:
        raise ValueError(f"bad stride/padding ({stride}, {padding})")
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    cols, ho, wo = _im2col(xp, kh, kw, stride)
    wmat = w.data.reshape(o, c * kh * kw)
    out = (cols @ wmat.T).reshape(b, ho, wo, o).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out[0] if single else out)

    def bw_builder():
        def bw(g):
            gm = (g[None] if single else g).transpose(0, 2, 3, 1).reshape(b * ho * wo, o)
            grads = []
            if w.requires:
                grads.append((w, (gm.T @ cols).reshape(w.data.shape)))
            if x.requires:
                dcols = (gm @ wmat).reshape(b, ho, wo, c, kh, kw)
                hp, wp = xp.shape[2], xp.shape[3]
                dxp = np.zeros((b, c, hp, wp), dtype=g.dtype)
                for u in range(kh):
                    for v in range(kw):
                        dxp[:, :, u : u + stride * ho : stride, v : v + stride * wo : stride] += (
                            dcols[:, :, :, :, u, v].transpose(0, 3, 1, 2)
                        )
                dx = dxp[:, :, padding : padding + h, padding : padding + wdt] if padding else dxp
                grads.append((x, dx[0] if single else dx))
            return grads

        return bw

    return _finish(out, bw_builder, x, w)


def linear(x, w, b=None) -> Tensor:
    """Affine map x @ w.T + b for x [B,n] or [n], w [m,n], b [m]."""
    x, w = as_tensor(x), as_tensor(w)
    b = as_tensor(b) if b is not None else None
    xd = x.data
    single = xd.ndim == 1
    if single:
        xd = xd[None]
    if xd.shape[1] != w.data.shape[1]:
        raise ValueError(f"linear shape mismatch: input {xd.shape} vs weight {w.data.shape}")
    out = xd @ w.data.T
    if b is not None:
        out = out + b.data
    out = out[0] if single else out

    def bw_builder():
        def bw(g):
            gm = g[None] if single else g
            grads = []
            if x.requires:
                dx = gm @ w.data
                grads.append((x, dx[0] if single else dx))
            if w.requires:
                grads.append((w, gm.T @ xd))
            if b is not None and b.requires:
                grads.append((b, gm.sum(axis=0)))
            return grads

        return bw

    inputs = (x, w) if b is None else (x, w, b)
    return _finish(out, bw_builder, *inputs)


def relu(x) -> Tensor:
    x = as_tensor(x)
    out = np.maximum(x.data, 0)

    def bw_builder():
        mask = x.data > 0

        def bw(g):
            return [(x, g * mask)]

        return bw

    return _finish(out, bw_builder, x)


def bias_add(x, b) -> Tensor:
    """Add a per-channel bias to a [B,C,H,W] or [C,H,W] feature map."""
    x, b = as_tensor(x), as_tensor(b)
    caxis = x.data.ndim - 3
    if x.data.ndim not in (3, 4) or b.data.ndim != 1 or x.data.shape[caxis] != b.data.shape[0]:
        raise ValueError(f"bias_add shape mismatch: {x.data.shape} vs {b.data.shape}")
    shape = (-1, 1, 1)
    out = x.data + b.data.reshape(shape)

    def bw_builder():
        def bw(g):
            grads = []
            if x.requires:
                grads.append((x, g))
            if b.requires:
                axes = tuple(i for i in range(g.ndim) if i != caxis)
                grads.append((b, g.sum(axis=axes)))
            return grads

        return bw

    return _finish(out, bw_builder, x, b)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ValueError(f"add shape mismatch: {a.data.shape} vs {b.data.shape}")
    out = a.data + b.data

    def bw_builder():
        def bw(g):
            return [(a, g), (b, g)]

        return bw

    return _finish(out, bw_builder, a, b)


def mul_scalar(x, c: float) -> Tensor:
    x = as_tensor(x)
    out = x.data * c

    def bw_builder():
        def bw(g):
            return [(x, g * c)]

        return bw

    return _finish(out, bw_builder, x)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)

    def bw_builder():
        def bw(g):
            return [(x, g.reshape(x.data.shape))]

        return bw

    return _finish(out, bw_builder, x)


def gather(src, idx) -> Tensor:
    """out = src.ravel()[idx], shaped like idx. Backward scatter-adds."""
    src = as_tensor(src)
    idx = np.asarray(idx, dtype=np.int64)
    flat = idx.ravel()
    if flat.size and (flat.min() < 0 or flat.max() >= src.data.size):
        raise ValueError("gather index out of range")
    out = src.data.ravel()[flat].reshape(idx.shape)

    def bw_builder():
        def bw(g):
            acc = np.bincount(flat, weights=g.ravel(), minlength=src.data.size)
            return [(src, acc.reshape(src.data.shape).astype(src.data.dtype, copy=False))]

        return bw

    return _finish(out, bw_builder, src)


def channel_permute(x, perm) -> Tensor:
    """Permute the channel axis of [B,C,H,W] or [C,H,W]: out[.., i] = x[.., perm[i]]."""
    x = as_tensor(x)
    perm = np.asarray(perm, dtype=np.int64)
    caxis = x.data.ndim - 3
    if x.data.ndim not in (3, 4) or perm.shape != (x.data.shape[caxis],):
        raise ValueError(f"channel_permute shape mismatch: {x.data.shape} vs perm {perm.shape}")
    out = np.take(x.data, perm, axis=caxis)

    def bw_builder():
        inv = np.empty_like(perm)
        inv[perm] = np.arange(perm.size)

        def bw(g):
            return [(x, np.take(g, inv, axis=caxis))]

        return bw

    return _finish(out, bw_builder, x)


def select_actions(q, actions) -> Tensor:
    """Pick q[i, actions[i]] from a [B,A] table."""
    q = as_tensor(q)
    actions = np.asarray(actions, dtype=np.int64)
    b, a = q.data.shape
    if actions.shape != (b,) or (actions.size and (actions.min() < 0 or actions.max() >= a)):
        raise ValueError("select_actions: bad action index array")
    rows = np.arange(b)
    out = q.data[rows, actions]

    def bw_builder():
        def bw(g):
            dq = np.zeros_like(q.data)
            dq[rows, actions] = g
            return [(q, dq)]

        return bw

    return _finish(out, bw_builder, q)


def dueling_combine(v, adv) -> Tensor:
    """q = v + adv - mean(adv) with v [B,1] and adv [B,A]."""
    v, adv = as_tensor(v), as_tensor(adv)
    if v.data.ndim != 2 or v.data.shape[1] != 1 or adv.data.ndim != 2:
        raise ValueError(f"dueling_combine expects v [B,1], adv [B,A]; got {v.data.shape}, {adv.data.shape}")
    out = v.data + adv.data - adv.data.mean(axis=1, keepdims=True)

    def bw_builder():
        def bw(g):
            grads = []
            if v.requires:
                grads.append((v, g.sum(axis=1, keepdims=True)))
            if adv.requires:
                grads.append((adv, g - g.mean(axis=1, keepdims=True)))
            return grads

        return bw

    return _finish(out, bw_builder, v, adv)


def mean_squared_error(pred, target, weights=None) -> Tensor:
    """mean(w * (pred - target)^2) over a 1-D batch; weights default to 1."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.data.shape != target.data.shape or pred.data.ndim != 1:
        raise ValueError(f"mean_squared_error expects matching 1-D arrays, got {pred.data.shape} vs {target.data.shape}")
    w = np.ones_like(pred.data) if weights is None else np.asarray(weights, dtype=pred.data.dtype)
    diff = pred.data - target.data
    out = np.asarray((w * diff * diff).mean(), dtype=pred.data.dtype)

    def bw_builder():
        def bw(g):
            grads = []
            scale = 2.0 * g / pred.data.size
            if pred.requires:
                grads.append((pred, scale * w * diff))
            if target.requires:
                grads.append((target, -scale * w * diff))
            return grads

        return bw

    return _finish(out, bw_builder, pred, target)


# ---------------------------------------------------------------------------
# optimizers


class SGD:
    def __init__(self, params: list, lr: float):
        self.params = list(params)
        self.lr = lr

    def step(self):
        for p in self.params:
            if p.grad is None:
                continue
            p.tensor.data -= self.lr * p.grad
            p.version += 1


class Adam:
    """Adaptive-moment optimizer with bias correction."""

    def __init__(self, params: list, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.tensor.data -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)
            p.version += 1


def make_optimizer(kind: str, params: list, lr: float):
    if kind == "sgd":
        return SGD(params, lr)
    if kind == "adam":
        return Adam(params, lr)
    raise ValueError(f"unknown optimizer kind {kind!r}")


def clip_grad_norm(params: list, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm
