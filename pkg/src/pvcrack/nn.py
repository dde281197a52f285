"""Dense tensor kernels with explicit forward/backward passes.

Activations are laid out (height, width, channels), convolution weights
(kh, kw, in_ch, out_ch). Every kernel also accepts a leading batch axis;
single-sample inputs are expanded and squeezed back transparently. The
default scalar type is float32; layers can be built in float64 so gradient
checks are not limited by single-precision noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(Exception):
    """Operand shapes are inconsistent or produce an empty output."""


def _as_batch(x: np.ndarray, rank: int) -> tuple[np.ndarray, bool]:
    if x.ndim == rank:
        return x[None], True
    if x.ndim == rank + 1:
        return x, False
    raise ShapeError(f"expected rank {rank} or {rank + 1} input, got shape {x.shape}")


class Layer:
    """Base layer: parameter arrays in ``params``, gradients in ``grads``."""

    params: list = []
    grads: list = []

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError


class Conv2D(Layer):
    """2-D cross-correlation (no kernel flip) with stride and zero padding."""

    def __init__(self, kh, kw, in_ch, out_ch, stride=1, padding=0, dtype=np.float32):
        if stride < 1 or padding < 0:
            raise ShapeError("stride must be >= 1 and padding >= 0")
        self.kh, self.kw = kh, kw
        self.in_ch, self.out_ch = in_ch, out_ch
        self.stride, self.padding = stride, padding
        self.w = np.zeros((kh, kw, in_ch, out_ch), dtype=dtype)
        self.b = np.zeros(out_ch, dtype=dtype)
        self.params = [self.w, self.b]
        self.grads = [np.zeros_like(self.w), np.zeros_like(self.b)]

    def out_extent(self, h, w):
        s, p = self.stride, self.padding
        oh = (h + 2 * p - self.kh) // s + 1
        ow = (w + 2 * p - self.kw) // s + 1
        if oh < 1 or ow < 1:
            raise ShapeError(
                f"conv output extent not positive for input {h}x{w}, "
                f"kernel {self.kh}x{self.kw}, stride {s}, padding {p}"
            )
        return oh, ow

    def _shift_slices(self, ky, kx, oh, ow):
        s = self.stride
        return (slice(ky, ky + s * (oh - 1) + 1, s),
                slice(kx, kx + s * (ow - 1) + 1, s))

    def forward(self, x):
        xb, squeezed = _as_batch(x, 3)
        if xb.shape[3] != self.in_ch:
            raise ShapeError(f"conv expects {self.in_ch} input channels, got {xb.shape[3]}")
        n, h, w = xb.shape[:3]
        oh, ow = self.out_extent(h, w)
        p = self.padding
        xp = np.pad(xb, ((0, 0), (p, p), (p, p), (0, 0))) if p else xb
        # im2col via one block copy per kernel offset; a single wide GEMM
        # then beats nine skinny ones on this layout.
        col = np.empty((n, oh, ow, self.kh, self.kw, self.in_ch), dtype=xb.dtype)
        for ky in range(self.kh):
            for kx in range(self.kw):
                ys, xs = self._shift_slices(ky, kx, oh, ow)
                col[:, :, :, ky, kx, :] = xp[:, ys, xs, :]
        col2d = col.reshape(-1, self.kh * self.kw * self.in_ch)
        y = col2d @ self.w.reshape(-1, self.out_ch) + self.b
        self._cache = (col2d, xp.shape, xb.shape, (n, oh, ow), squeezed)
        return y.reshape(n, oh, ow, self.out_ch)[0] if squeezed \
            else y.reshape(n, oh, ow, self.out_ch)

    def backward(self, dy):
        col2d, xp_shape, x_shape, (n, oh, ow), squeezed = self._cache
        dyb = dy[None] if squeezed else dy
        p = self.padding
        dyf = dyb.reshape(-1, self.out_ch)
        dw, db = self.grads
        dw[:] = (col2d.T @ dyf).reshape(dw.shape)
        db[:] = dyf.sum(axis=0)
        dxp = np.zeros(xp_shape, dtype=dyb.dtype)
        for ky in range(self.kh):
            for kx in range(self.kw):
                ys, xs = self._shift_slices(ky, kx, oh, ow)
                dxp[:, ys, xs, :] += (dyf @ self.w[ky, kx].T).reshape(
                    n, oh, ow, self.in_ch)
        dx = dxp[:, p:p + x_shape[1], p:p + x_shape[2], :] if p else dxp
        return dx[0] if squeezed else dx


class Dense(Layer):
    """Affine map y = x @ W + b over flattened inputs."""

    def __init__(self, in_dim, out_dim, dtype=np.float32):
        self.in_dim, self.out_dim = in_dim, out_dim
        self.w = np.zeros((in_dim, out_dim), dtype=dtype)
        self.b = np.zeros(out_dim, dtype=dtype)
        self.params = [self.w, self.b]
        self.grads = [np.zeros_like(self.w), np.zeros_like(self.b)]

    def forward(self, x):
        xb, squeezed = _as_batch(x, 1)
        if xb.shape[1] != self.in_dim:
            raise ShapeError(f"dense expects length {self.in_dim}, got {xb.shape[1]}")
        y = xb @ self.w + self.b
        self._cache = (xb, squeezed)
        return y[0] if squeezed else y

    def backward(self, dy):
        xb, squeezed = self._cache
        dyb = dy[None] if squeezed else dy
        self.grads[0][:] = xb.T @ dyb
        self.grads[1][:] = dyb.sum(axis=0)
        dx = dyb @ self.w.T
        return dx[0] if squeezed else dx


class ReLU(Layer):
    def forward(self, x):
        self._mask = x > 0
        return np.maximum(x, 0)

    def backward(self, dy):
        return dy * self._mask


class MaxPool2D(Layer):
    """Channel-wise window maximum. Backward routes each gradient to the
    first maximum in row-major window order."""

    def __init__(self, window, stride, padding=0):
        if window < 1 or stride < 1 or padding < 0:
            raise ShapeError("window and stride must be >= 1, padding >= 0")
        self.window, self.stride, self.padding = window, stride, padding

    def forward(self, x):
        xb, squeezed = _as_batch(x, 3)
        p = self.padding
        if p:
            pad_value = -np.inf if np.issubdtype(xb.dtype, np.floating) else np.iinfo(xb.dtype).min
            xb = np.pad(xb, ((0, 0), (p, p), (p, p), (0, 0)), constant_values=pad_value)
        n, h, w, c = xb.shape
        k, s = self.window, self.stride
        if k > h or k > w:
            raise ShapeError(f"pool window {k} larger than input {h}x{w}")
        if k == 2 and s == 2:
            # The ubiquitous VGG pool: four strided views and three maxima
            # instead of materializing every window.
            oh, ow = (h - 2) // 2 + 1, (w - 2) // 2 + 1
            crop = xb[:, :oh * 2, :ow * 2, :]
            views = (crop[:, 0::2, 0::2, :], crop[:, 0::2, 1::2, :],
                     crop[:, 1::2, 0::2, :], crop[:, 1::2, 1::2, :])
            y = np.maximum(np.maximum(views[0], views[1]),
                           np.maximum(views[2], views[3]))
            self._fast = (views, y)
            self._cache = (xb.shape, squeezed)
            return y[0] if squeezed else y
        self._fast = None
        win = sliding_window_view(xb, (k, k), axis=(1, 2))[:, ::s, ::s]
        flat = win.reshape(*win.shape[:4], k * k)
        self._argmax = flat.argmax(axis=-1)
        y = np.take_along_axis(flat, self._argmax[..., None], axis=-1)[..., 0]
        self._cache = (xb.shape, squeezed)
        return y[0] if squeezed else y

    def backward(self, dy):
        padded_shape, squeezed = self._cache
        dyb = dy[None] if squeezed else dy
        k, s, p = self.window, self.stride, self.padding
        dxp = np.zeros(padded_shape, dtype=dyb.dtype)
        if self._fast is not None:
            views, y = self._fast
            oh, ow = y.shape[1:3]
            taken = np.zeros(y.shape, dtype=bool)
            # Row-major window order; the first view matching the maximum
            # takes the whole gradient.
            offsets = ((0, 0), (0, 1), (1, 0), (1, 1))
            for (wy, wx), view in zip(offsets, views):
                hit = (view == y) & ~taken
                taken |= hit
                dxp[:, wy:oh * 2:2, wx:ow * 2:2, :] += dyb * hit
        else:
            ni, oy, ox, ci = np.indices(self._argmax.shape, sparse=False)
            hy = oy * s + self._argmax // k
            hx = ox * s + self._argmax % k
            np.add.at(dxp, (ni, hy, hx, ci), dyb)
        dx = dxp[:, p:padded_shape[1] - p, p:padded_shape[2] - p, :] if p else dxp
        return dx[0] if squeezed else dx


class GlobalAvgPool(Layer):
    """Reduce each channel's spatial plane to its mean: (h, w, c) -> (c,)."""

    def forward(self, x):
        xb, squeezed = _as_batch(x, 3)
        self._cache = (xb.shape, squeezed)
        y = xb.mean(axis=(1, 2))
        return y[0] if squeezed else y

    def backward(self, dy):
        (n, h, w, c), squeezed = self._cache
        dyb = dy[None] if squeezed else dy
        dx = np.broadcast_to(dyb[:, None, None, :] / (h * w), (n, h, w, c)).astype(dyb.dtype)
        return dx[0] if squeezed else dx.copy()


class Flatten(Layer):
    def forward(self, x):
        xb, squeezed = _as_batch(x, 3)
        self._cache = (xb.shape, squeezed)
        y = xb.reshape(xb.shape[0], -1)
        return y[0] if squeezed else y

    def backward(self, dy):
        shape, squeezed = self._cache
        dyb = dy[None] if squeezed else dy
        dx = dyb.reshape(shape)
        return dx[0] if squeezed else dx


class ConcatChannels(Layer):
    """Stack two or more tensors along the channel axis."""

    def forward(self, xs):
        if len(xs) < 2:
            raise ShapeError("concat needs at least two operands")
        spatial = {x.shape[:-1] for x in xs}
        if len(spatial) != 1:
            raise ShapeError(f"concat spatial extents differ: {sorted(spatial)}")
        self._splits = np.cumsum([x.shape[-1] for x in xs])[:-1]
        return np.concatenate(xs, axis=-1)

    def backward(self, dy):
        return np.split(dy, self._splits, axis=-1)


class Softmax(Layer):
    def forward(self, x):
        self._s = softmax(x)
        return self._s

    def backward(self, dy):
        s = self._s
        return s * (dy - (dy * s).sum(axis=-1, keepdims=True))


def softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits: np.ndarray, target_class: int):
    """Stabilized -log softmax(logits)[target]; returns (loss, logit gradient)."""
    if not np.all(np.isfinite(logits)):
        raise ValueError("non-finite logits")
    if not 0 <= target_class < logits.shape[-1]:
        raise IndexError(f"target class {target_class} out of range")
    m = logits.max()
    z = logits - m
    lse = m + np.log(np.exp(z).sum())
    loss = float(lse - logits[target_class])
    grad = softmax(logits)
    grad[target_class] -= 1
    return loss, grad


def cross_entropy_batch(logits: np.ndarray, targets: np.ndarray):
    """Mean cross-entropy over a batch; gradient is scaled by 1/N."""
    if not np.all(np.isfinite(logits)):
        raise ValueError("non-finite logits")
    n = logits.shape[0]
    m = logits.max(axis=1, keepdims=True)
    z = logits - m
    lse = m[:, 0] + np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(lse - logits[np.arange(n), targets]))
    grad = softmax(logits)
    grad[np.arange(n), targets] -= 1
    return loss, grad / n


@dataclass
class OptimConfig:
    kind: str = "adam"          # "sgd" | "adam"
    learning_rate: float = 1e-3
    momentum: float = 0.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ValueError("adam betas must be in (0, 1)")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")


class Optimizer:
    """SGD with momentum or bias-corrected Adam over a fixed parameter list."""

    def __init__(self, cfg: OptimConfig):
        self.cfg = cfg
        self.t = 0
        self._state: list[dict] = []

    def step(self, params: list, grads: list) -> None:
        if len(params) != len(grads):
            raise ValueError("params and grads differ in length")
        if not self._state:
            self._state = [
                {"v": np.zeros_like(p), "m": np.zeros_like(p)} for p in params
            ]
        cfg = self.cfg
        self.t += 1
        for p, g, st in zip(params, grads, self._state):
            if p.shape != g.shape:
                raise ValueError(f"param/grad shape mismatch: {p.shape} vs {g.shape}")
            if cfg.kind == "sgd":
                st["v"] = cfg.momentum * st["v"] + g
                p -= cfg.learning_rate * st["v"]
            else:
                st["m"] = cfg.adam_beta1 * st["m"] + (1 - cfg.adam_beta1) * g
                st["v"] = cfg.adam_beta2 * st["v"] + (1 - cfg.adam_beta2) * g * g
                m_hat = st["m"] / (1 - cfg.adam_beta1 ** self.t)
                v_hat = st["v"] / (1 - cfg.adam_beta2 ** self.t)
                p -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon)


def grad_check(layer: Layer, x: np.ndarray, eps: float = 1e-5, rng=None) -> float:
    """Max relative error between analytic and central-difference gradients.

    Run with float64 layers and inputs; float32 rounding would dominate the
    comparison otherwise.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    y = layer.forward(x)
    r = rng.standard_normal(y.shape)

    dx = layer.backward(r)
    analytic = [np.asarray(dx, dtype=np.float64)]
    analytic += [g.astype(np.float64).copy() for g in layer.grads]

    def objective():
        return float(np.sum(layer.forward(x) * r))

    max_err = 0.0
    for a, tensor in zip(analytic, [x] + list(layer.params)):
        flat = tensor.reshape(-1)
        numeric = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = objective()
            flat[i] = orig - eps
            f_minus = objective()
            flat[i] = orig
            numeric[i] = (f_plus - f_minus) / (2 * eps)
        a_flat = a.reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a_flat), np.abs(numeric)), 1e-8)
        max_err = max(max_err, float(np.max(np.abs(a_flat - numeric) / denom)))
    return max_err
