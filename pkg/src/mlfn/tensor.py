"""Dense array kernels used by the network.

Every kernel comes in a forward/backward pair. The forward accepts an
optional ``ctx`` dict; when given, it is filled with whatever the matching
``*_backward`` function needs. Keeping the pairing explicit (instead of
closures) makes the tape in :mod:`mlfn.autodiff` easy to inspect and keeps
the kernels usable on their own.

Arrays are plain numpy arrays. Activations follow the convention
``(batch, channels, height, width)`` for feature maps and
``(batch, features)`` for vectors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateBatchError, ShapeError

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ShapeError(msg)


def _same_dtype(*arrays: np.ndarray) -> None:
    dtypes = {a.dtype for a in arrays}
    _require(len(dtypes) == 1, f"mixed dtypes {sorted(map(str, dtypes))}")


# ---------------------------------------------------------------------------
# mode-4 tensor/vector product


def mode4_product(m: np.ndarray, s: np.ndarray, *, ctx: dict | None = None) -> np.ndarray:
    """Contract the trailing axis of ``m`` with the selection vector ``s``.

    ``m`` stacks K same-shaped arrays along its last axis. With ``s`` of
    shape ``(K,)`` the result is the s-weighted sum of those slices. A
    batched form is also accepted: ``m`` of shape ``(N, ..., K)`` with
    ``s`` of shape ``(N, K)`` contracts each batch entry with its own
    weight vector.
    """
    k = m.shape[-1]
    if s.ndim == 1:
        _require(s.shape[0] == k,
                 f"selection has {s.shape[0]} entries, stack has {k} slices")
        out = m @ s
    elif s.ndim == 2:
        _require(m.ndim >= 2 and s.shape == (m.shape[0], k),
                 f"batched selection {s.shape} does not match stack {m.shape}")
        n = m.shape[0]
        out = np.matmul(m.reshape(n, -1, k), s[:, :, None])[..., 0]
        out = out.reshape(m.shape[:-1])
    else:
        raise ShapeError(f"selection must be rank 1 or 2, got rank {s.ndim}")
    if ctx is not None:
        ctx["m"] = m
        ctx["s"] = s
    return out


def mode4_product_backward(ctx: dict, grad_out: np.ndarray):
    m, s = ctx["m"], ctx["s"]
    if s.ndim == 1:
        gm = grad_out[..., None] * s
        flat_axes = tuple(range(grad_out.ndim))
        gs = np.tensordot(grad_out, m, axes=(flat_axes, flat_axes))
    else:
        n, k = s.shape
        gm = grad_out[..., None] * s.reshape(n, *([1] * (m.ndim - 2)), k)
        gs = np.matmul(grad_out.reshape(n, 1, -1), m.reshape(n, -1, k))[:, 0, :]
    return gm, gs


# ---------------------------------------------------------------------------
# convolution


@dataclass(frozen=True)
class ConvSpec:
    """Static description of a 2-d convolution layer."""

    in_channels: int
    out_channels: int
    kernel: tuple[int, int]
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)

    def __post_init__(self):
        _require(self.in_channels >= 1 and self.out_channels >= 1,
                 "channel counts must be positive")
        _require(all(k >= 1 for k in self.kernel), f"bad kernel {self.kernel}")
        _require(all(s >= 1 for s in self.stride), f"bad stride {self.stride}")
        _require(all(p >= 0 for p in self.padding), f"bad padding {self.padding}")

    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, *self.kernel)

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        oh = (h + 2 * self.padding[0] - self.kernel[0]) // self.stride[0] + 1
        ow = (w + 2 * self.padding[1] - self.kernel[1]) // self.stride[1] + 1
        _require(oh >= 1 and ow >= 1,
                 f"input {h}x{w} too small for kernel {self.kernel} "
                 f"stride {self.stride} padding {self.padding}")
        return oh, ow


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray, spec: ConvSpec,
           *, ctx: dict | None = None) -> np.ndarray:
    """Strided 2-d cross-correlation with bias.

    Lowered to a single matrix product per batch: the padded input is viewed
    as overlapping patches (no copy until the reshape) and multiplied by the
    flattened kernel bank.
    """
    _require(x.ndim == 4, f"input must be rank 4, got {x.shape}")
    _require(x.shape[1] == spec.in_channels,
             f"input has {x.shape[1]} channels, spec expects {spec.in_channels}")
    _require(w.shape == spec.weight_shape(),
             f"weight {w.shape} does not match spec {spec.weight_shape()}")
    _require(b.shape == (spec.out_channels,),
             f"bias {b.shape} does not match {spec.out_channels} output channels")
    _same_dtype(x, w, b)

    n = x.shape[0]
    kh, kw = spec.kernel
    sh, sw = spec.stride
    ph, pw = spec.padding
    oh, ow = spec.out_hw(x.shape[2], x.shape[3])

    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
    sn, sc, srow, scol = xp.strides
    patches = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, spec.in_channels, kh, kw, oh, ow),
        strides=(sn, sc, srow, scol, srow * sh, scol * sw),
        writeable=False,
    )
    cols = patches.reshape(n, spec.in_channels * kh * kw, oh * ow)
    wmat = w.reshape(spec.out_channels, -1)
    out = wmat @ cols
    out += b[:, None]
    out = out.reshape(n, spec.out_channels, oh, ow)

    if ctx is not None:
        ctx["cols"] = cols
        ctx["w"] = w
        ctx["spec"] = spec
        ctx["x_shape"] = x.shape
        ctx["padded_shape"] = xp.shape
        ctx["out_hw"] = (oh, ow)
    return out


def conv2d_backward(ctx: dict, grad_out: np.ndarray):
    cols, w, spec = ctx["cols"], ctx["w"], ctx["spec"]
    n, _, h, wid = ctx["x_shape"]
    oh, ow = ctx["out_hw"]
    kh, kw = spec.kernel
    sh, sw = spec.stride
    ph, pw = spec.padding

    go = grad_out.reshape(n, spec.out_channels, oh * ow)
    gb = go.sum(axis=(0, 2))
    wmat = w.reshape(spec.out_channels, -1)
    gw = np.matmul(go, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)

    gcols = wmat.T @ go
    if (kh, kw) == (1, 1) and (sh, sw) == (1, 1) and (ph, pw) == (0, 0):
        # pointwise convolution: scatter step collapses to a reshape
        return gcols.reshape(n, spec.in_channels, oh, ow), gw, gb
    gcols = gcols.reshape(n, spec.in_channels, kh, kw, oh, ow)
    gxp = np.zeros(ctx["padded_shape"], dtype=grad_out.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i:i + sh * oh:sh, j:j + sw * ow:sw] += gcols[:, :, i, j]
    gx = gxp[:, :, ph:ph + h, pw:pw + wid] if (ph or pw) else gxp
    return gx, gw, gb


# ---------------------------------------------------------------------------
# pooling


def global_avg_pool(x: np.ndarray, *, ctx: dict | None = None) -> np.ndarray:
    """Average each channel over its full spatial extent: (N,C,H,W) -> (N,C)."""
    _require(x.ndim == 4, f"input must be rank 4, got {x.shape}")
    if ctx is not None:
        ctx["shape"] = x.shape
    return x.mean(axis=(2, 3))


def global_avg_pool_backward(ctx: dict, grad_out: np.ndarray) -> np.ndarray:
    n, c, h, w = ctx["shape"]
    g = grad_out / (h * w)
    return np.broadcast_to(g[:, :, None, None], (n, c, h, w)).copy()


# ---------------------------------------------------------------------------
# batch normalisation


@dataclass
class RunningStats:
    """Exponential moving averages a batch-norm layer carries across steps."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32) -> "RunningStats":
        return cls(mean=np.zeros(channels, dtype=dtype),
                   var=np.ones(channels, dtype=dtype))

    def copy(self) -> "RunningStats":
        return RunningStats(self.mean.copy(), self.var.copy())


def _bn_axes(x: np.ndarray) -> tuple:
    if x.ndim == 4:
        return (0, 2, 3)
    if x.ndim == 2:
        return (0,)
    raise ShapeError(f"batch norm expects rank 2 or 4 input, got {x.shape}")


def _bn_expand(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape(1, -1, *([1] * (ndim - 2)))


def batch_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
               state: RunningStats, *, training: bool,
               momentum: float = BN_MOMENTUM, eps: float = BN_EPS,
               ctx: dict | None = None) -> np.ndarray:
    """Normalise per channel, scale by gamma, shift by beta.

    In training mode the batch statistics are used (biased variance) and the
    running averages in ``state`` are updated in place as
    ``running = momentum * running + (1 - momentum) * batch``. In eval mode
    the stored running statistics are used and ``state`` is untouched.
    Training mode needs at least two samples in the batch.
    """
    axes = _bn_axes(x)
    c = x.shape[1]
    _require(gamma.shape == (c,) and beta.shape == (c,),
             f"gamma/beta must have shape ({c},)")
    _same_dtype(x, gamma, beta)

    if training:
        if x.shape[0] < 2:
            raise DegenerateBatchError(
                "batch norm in training mode needs a batch of at least 2")
        mean = x.mean(axis=axes)
        xhat = x - _bn_expand(mean, x.ndim)
        var = np.mean(np.square(xhat), axis=axes)
        state.mean[...] = momentum * state.mean + (1.0 - momentum) * mean
        state.var[...] = momentum * state.var + (1.0 - momentum) * var
        ivar = 1.0 / np.sqrt(var + eps)
        xhat *= _bn_expand(ivar, x.ndim)
    else:
        mean = state.mean.astype(x.dtype, copy=False)
        var = state.var.astype(x.dtype, copy=False)
        ivar = 1.0 / np.sqrt(var + eps)
        xhat = (x - _bn_expand(mean, x.ndim)) * _bn_expand(ivar, x.ndim)
    out = _bn_expand(gamma, x.ndim) * xhat
    out += _bn_expand(beta, x.ndim)

    if ctx is not None:
        ctx["xhat"] = xhat
        ctx["ivar"] = ivar
        ctx["gamma"] = gamma
        ctx["axes"] = axes
        ctx["training"] = training
    return out


def batch_norm_backward(ctx: dict, grad_out: np.ndarray):
    xhat, ivar, gamma = ctx["xhat"], ctx["ivar"], ctx["gamma"]
    axes = ctx["axes"]
    ndim = grad_out.ndim

    gbeta = grad_out.sum(axis=axes)
    ggamma = (grad_out * xhat).sum(axis=axes)

    if not ctx["training"]:
        gx = grad_out * _bn_expand(gamma * ivar, ndim)
        return gx, ggamma, gbeta

    # gx = gamma*ivar * (g - mean(g) - xhat*mean(g*xhat)), using that the
    # channel sums of gamma*g factor as gamma * (channel sums of g)
    m = grad_out.size // grad_out.shape[1]
    gx = grad_out - _bn_expand(gbeta / m, ndim)
    gx -= xhat * _bn_expand(ggamma / m, ndim)
    gx *= _bn_expand(gamma * ivar, ndim)
    return gx, ggamma, gbeta


# ---------------------------------------------------------------------------
# fully connected


def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray,
           *, ctx: dict | None = None) -> np.ndarray:
    """Affine map ``x @ w + b`` for x of shape (N, D), w of shape (D, E)."""
    _require(x.ndim == 2 and w.ndim == 2, "linear expects rank-2 input and weight")
    _require(x.shape[1] == w.shape[0],
             f"input width {x.shape[1]} does not match weight rows {w.shape[0]}")
    _require(b.shape == (w.shape[1],), f"bias {b.shape} does not match {w.shape[1]}")
    _same_dtype(x, w, b)
    if ctx is not None:
        ctx["x"] = x
        ctx["w"] = w
    return x @ w + b


def linear_backward(ctx: dict, grad_out: np.ndarray):
    x, w = ctx["x"], ctx["w"]
    gx = grad_out @ w.T
    gw = x.T @ grad_out
    gb = grad_out.sum(axis=0)
    return gx, gw, gb


# ---------------------------------------------------------------------------
# activations


def activation(x: np.ndarray, kind: str, *, ctx: dict | None = None) -> np.ndarray:
    """Elementwise nonlinearity, ``kind`` is "relu" or "sigmoid".

    The sigmoid is computed in the numerically stable split form and its
    output clamped into the open interval (0, 1): in the deeply saturated
    regime the true value is unrepresentable anyway, and downstream code
    relies on gate values never reaching the endpoints exactly.
    """
    if kind == "relu":
        out = np.maximum(x, 0)
        if ctx is not None:
            ctx["kind"] = kind
            ctx["mask"] = x > 0
        return out
    if kind == "sigmoid":
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        info = np.finfo(x.dtype)
        np.clip(out, info.tiny, 1.0 - info.epsneg, out=out)
        if ctx is not None:
            ctx["kind"] = kind
            ctx["out"] = out
        return out
    raise ValueError(f"unknown activation kind {kind!r}")


def activation_backward(ctx: dict, grad_out: np.ndarray) -> np.ndarray:
    if ctx["kind"] == "relu":
        return grad_out * ctx["mask"]
    s = ctx["out"]
    return grad_out * s * (1.0 - s)


# ---------------------------------------------------------------------------
# shape plumbing


def concat(parts: list[np.ndarray], *, ctx: dict | None = None) -> np.ndarray:
    """Join arrays along their last axis; leading shapes must agree."""
    _require(len(parts) >= 1, "concat needs at least one part")
    lead = parts[0].shape[:-1]
    for p in parts[1:]:
        _require(p.shape[:-1] == lead,
                 f"leading shapes differ: {p.shape[:-1]} vs {lead}")
    _same_dtype(*parts)
    if ctx is not None:
        ctx["widths"] = [p.shape[-1] for p in parts]
    if len(parts) == 1:
        return parts[0]
    return np.concatenate(parts, axis=-1)


def concat_backward(ctx: dict, grad_out: np.ndarray) -> list[np.ndarray]:
    widths = ctx["widths"]
    out = []
    off = 0
    for w in widths:
        out.append(grad_out[..., off:off + w])
        off += w
    return out


def stack_last(parts: list[np.ndarray], *, ctx: dict | None = None) -> np.ndarray:
    """Stack same-shaped arrays along a new trailing axis."""
    _require(len(parts) >= 1, "stack needs at least one part")
    shape = parts[0].shape
    for p in parts[1:]:
        _require(p.shape == shape, f"shapes differ: {p.shape} vs {shape}")
    _same_dtype(*parts)
    if ctx is not None:
        ctx["count"] = len(parts)
    return np.stack(parts, axis=-1)


def stack_last_backward(ctx: dict, grad_out: np.ndarray) -> list[np.ndarray]:
    # contiguous copies: every slice feeds a chain of elementwise backwards
    return [np.ascontiguousarray(grad_out[..., k]) for k in range(ctx["count"])]


def add(a: np.ndarray, b: np.ndarray, *, ctx: dict | None = None) -> np.ndarray:
    _require(a.shape == b.shape, f"add shapes differ: {a.shape} vs {b.shape}")
    _same_dtype(a, b)
    return a + b


def add_backward(ctx: dict, grad_out: np.ndarray):
    return grad_out, grad_out


def scale(x: np.ndarray, c: float, *, ctx: dict | None = None) -> np.ndarray:
    if ctx is not None:
        ctx["c"] = c
    return x * x.dtype.type(c)


def scale_backward(ctx: dict, grad_out: np.ndarray) -> np.ndarray:
    return grad_out * grad_out.dtype.type(ctx["c"])


def sum_all(x: np.ndarray, *, ctx: dict | None = None) -> np.ndarray:
    if ctx is not None:
        ctx["shape"] = x.shape
        ctx["dtype"] = x.dtype
    return np.asarray(x.sum())


def sum_all_backward(ctx: dict, grad_out: np.ndarray) -> np.ndarray:
    return np.full(ctx["shape"], grad_out, dtype=ctx["dtype"])


def dot_all(a: np.ndarray, b: np.ndarray, *, ctx: dict | None = None) -> np.ndarray:
    """Full contraction sum(a * b); used as a linear probe loss in tests."""
    _require(a.shape == b.shape, f"dot shapes differ: {a.shape} vs {b.shape}")
    if ctx is not None:
        ctx["a"] = a
        ctx["b"] = b
    return np.asarray((a * b).sum())


def dot_all_backward(ctx: dict, grad_out: np.ndarray):
    return grad_out * ctx["b"], grad_out * ctx["a"]


def flip_horizontal(x: np.ndarray) -> np.ndarray:
    """Mirror feature maps along the width axis (last axis of N,C,H,W)."""
    _require(x.ndim == 4, f"input must be rank 4, got {x.shape}")
    return x[:, :, :, ::-1].copy()


# ---------------------------------------------------------------------------
# loss


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray,
                          *, ctx: dict | None = None) -> np.ndarray:
    """Mean cross entropy of a softmax over logits, log-sum-exp stabilised.

    ``logits`` has shape (N, C); ``labels`` holds integer class indices in
    ``[0, C)``. Returns a scalar array.
    """
    _require(logits.ndim == 2, f"logits must be rank 2, got {logits.shape}")
    n, c = logits.shape
    _require(labels.shape == (n,), f"labels {labels.shape} do not match batch {n}")
    _require(np.issubdtype(labels.dtype, np.integer), "labels must be integers")
    _require(bool(np.all(labels >= 0)) and bool(np.all(labels < c)),
             f"labels must lie in [0, {c})")

    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    picked = z[np.arange(n), labels]
    loss = (lse - picked).mean()

    if ctx is not None:
        ez = np.exp(z)
        ctx["probs"] = ez / ez.sum(axis=1, keepdims=True)
        ctx["labels"] = labels
    return np.asarray(loss)


def softmax_cross_entropy_backward(ctx: dict, grad_out: np.ndarray) -> np.ndarray:
    p = ctx["probs"]
    labels = ctx["labels"]
    n = p.shape[0]
    g = p.copy()
    g[np.arange(n), labels] -= 1.0
    g /= n
    return g * grad_out
