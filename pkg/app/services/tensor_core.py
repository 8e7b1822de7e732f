# app/services/tensor_core.py
"""
Dense N-D tensor math with hand-written backward passes.

Tensors are plain numpy arrays laid out N x C x D x H x W for feature maps and
N x F for vectors. Parameters and their gradients live in flat dicts keyed by
"<layer>.<param>", which keeps checkpointing and the optimizer trivial.

Every layer is stateless: forward() returns (output, cache) and backward()
consumes that cache, so the same network object can run several forward
passes (two augmented views, a frozen branch) before any backward.
Kernels keep the dtype of their inputs: float32 at runtime, float64 for
finite-difference checks.
"""
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Optional, Sequence, Tuple

import numpy as np

from app.errors import NumericError, ShapeError

logger = logging.getLogger(__name__)

Array = np.ndarray
Params = Dict[str, Array]
Grads = Dict[str, Array]

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def check_finite(x: Array, layer: str) -> Array:
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite activation", layer=layer)
    return x


def _require_ndim(x: Array, ndim: int, what: str) -> None:
    if x.ndim != ndim:
        raise ShapeError(f"{what}: expected {ndim}-D array, got shape {tuple(x.shape)}")


def conv_output_extent(extent: int, kernel: int, stride: int = 1, padding: int = 0) -> int:
    span = extent + 2 * padding - kernel
    if span < 0 or stride < 1:
        raise ShapeError(f"conv: kernel {kernel} does not fit extent {extent} with padding {padding}")
    return span // stride + 1


# -------------------------------
# conv3d
# -------------------------------
def _window(xp: Array, a: int, b: int, c: int, out_shape: Tuple[int, int, int], stride: int) -> Array:
    do, ho, wo = out_shape
    return xp[:, :,
              a:a + stride * (do - 1) + 1:stride,
              b:b + stride * (ho - 1) + 1:stride,
              c:c + stride * (wo - 1) + 1:stride]


def conv3d_forward(x: Array, w: Array, stride: int = 1, padding: int = 0) -> Array:
    """Cross-correlation of N x C_in x D x H x W input with C_out x C_in x k x k x k weights.

    Accumulates one tensordot per kernel offset, in fixed offset order.
    """
    _require_ndim(x, 5, "conv3d input")
    _require_ndim(w, 5, "conv3d weights")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv3d: input has {x.shape[1]} channels, weights expect {w.shape[1]}")
    c_out, _, kd, kh, kw = w.shape
    out_shape = tuple(conv_output_extent(e, k, stride, padding)
                      for e, k in zip(x.shape[2:], (kd, kh, kw)))
    xp = np.pad(x, ((0, 0), (0, 0)) + ((padding, padding),) * 3) if padding else x
    acc = np.zeros((c_out, x.shape[0]) + out_shape, dtype=np.result_type(x, w))
    for a in range(kd):
        for b in range(kh):
            for c in range(kw):
                patch = _window(xp, a, b, c, out_shape, stride)
                acc += np.tensordot(w[:, :, a, b, c], patch, axes=([1], [1]))
    return np.ascontiguousarray(acc.transpose(1, 0, 2, 3, 4))


def conv3d_backward(dout: Array, x: Array, w: Array, stride: int = 1,
                    padding: int = 0) -> Tuple[Array, Array]:
    """Returns (d input, d weights)."""
    _, _, kd, kh, kw = w.shape
    out_shape = dout.shape[2:]
    xp = np.pad(x, ((0, 0), (0, 0)) + ((padding, padding),) * 3) if padding else x
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    dout_t = dout.transpose(1, 0, 2, 3, 4)
    for a in range(kd):
        for b in range(kh):
            for c in range(kw):
                patch = _window(xp, a, b, c, out_shape, stride)
                dw[:, :, a, b, c] = np.tensordot(dout_t, patch, axes=([1, 2, 3, 4], [0, 2, 3, 4]))
                dpatch = np.tensordot(w[:, :, a, b, c], dout_t, axes=([0], [0]))
                _window(dxp, a, b, c, out_shape, stride)[...] += dpatch.transpose(1, 0, 2, 3, 4)
    if padding:
        dxp = dxp[:, :, padding:-padding, padding:-padding, padding:-padding]
    return np.ascontiguousarray(dxp), dw


# -------------------------------
# batch norm (any rank >= 2, channel axis 1)
# -------------------------------
def _bn_axes(x: Array) -> Tuple[Tuple[int, ...], Tuple[int, ...]]:
    axes = (0,) + tuple(range(2, x.ndim))
    shape = (1, x.shape[1]) + (1,) * (x.ndim - 2)
    return axes, shape


def batchnorm_forward(x: Array, gamma: Array, beta: Array, running_mean: Array,
                      running_var: Array, train: bool, eps: float = BN_EPS,
                      momentum: float = BN_MOMENTUM) -> Tuple[Array, Tuple]:
    """Train mode normalizes with batch statistics and updates the running
    statistics in place; eval mode only reads them."""
    if x.ndim < 2 or gamma.shape != (x.shape[1],):
        raise ShapeError(f"batchnorm: gamma {gamma.shape} does not match input {x.shape}")
    axes, shape = _bn_axes(x)
    if train:
        count = x.size // x.shape[1]
        if count < 2:
            raise NumericError("degenerate batch variance: one value per channel in train mode")
        x64 = x.astype(np.float64)
        mean = x64.mean(axis=axes)
        var = x64.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean.astype(running_mean.dtype)
        running_var *= 1.0 - momentum
        running_var += momentum * (var * count / (count - 1)).astype(running_var.dtype)
    else:
        mean = running_mean.astype(np.float64)
        var = running_var.astype(np.float64)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = ((x - mean.reshape(shape)) * inv_std.reshape(shape)).astype(x.dtype)
    out = gamma.reshape(shape) * xhat + beta.reshape(shape)
    return out.astype(x.dtype), (xhat, inv_std.astype(x.dtype), gamma, train)


def batchnorm_backward(dout: Array, cache: Tuple) -> Tuple[Array, Array, Array]:
    """Returns (d input, d gamma, d beta)."""
    xhat, inv_std, gamma, train = cache
    axes, shape = _bn_axes(dout)
    dgamma = (dout * xhat).sum(axis=axes)
    dbeta = dout.sum(axis=axes)
    dxhat = dout * gamma.reshape(shape)
    if not train:
        return dxhat * inv_std.reshape(shape), dgamma, dbeta
    m = dout.size // dout.shape[1]
    dx = (inv_std.reshape(shape) / m) * (
        m * dxhat
        - dxhat.sum(axis=axes).reshape(shape)
        - xhat * (dxhat * xhat).sum(axis=axes).reshape(shape)
    )
    return dx.astype(dout.dtype), dgamma, dbeta


# -------------------------------
# pointwise / pooling / dense
# -------------------------------
def relu_forward(x: Array) -> Array:
    return np.maximum(x, 0)


def relu_backward(dout: Array, x: Array) -> Array:
    return dout * (x > 0)


def maxpool3d_forward(x: Array, kernel: int) -> Tuple[Array, Tuple]:
    """Non-overlapping max pooling (stride == kernel, floor on extents).

    Ties go to the lowest linear index inside the window."""
    _require_ndim(x, 5, "maxpool3d input")
    n, c, d, h, w = x.shape
    if min(d, h, w) < kernel:
        raise ShapeError(f"maxpool3d: extent {(d, h, w)} smaller than kernel {kernel}")
    do, ho, wo = d // kernel, h // kernel, w // kernel
    crop = x[:, :, :do * kernel, :ho * kernel, :wo * kernel]
    win = crop.reshape(n, c, do, kernel, ho, kernel, wo, kernel)
    win = win.transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(n, c, do, ho, wo, kernel ** 3)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, (x.shape, arg, kernel)


def maxpool3d_backward(dout: Array, cache: Tuple) -> Array:
    shape, arg, kernel = cache
    n, c, do, ho, wo = dout.shape
    onehot = np.zeros((n, c, do, ho, wo, kernel ** 3), dtype=dout.dtype)
    np.put_along_axis(onehot, arg[..., None], dout[..., None], axis=-1)
    onehot = onehot.reshape(n, c, do, ho, wo, kernel, kernel, kernel)
    onehot = onehot.transpose(0, 1, 2, 5, 3, 6, 4, 7).reshape(n, c, do * kernel, ho * kernel, wo * kernel)
    dx = np.zeros(shape, dtype=dout.dtype)
    dx[:, :, :do * kernel, :ho * kernel, :wo * kernel] = onehot
    return dx


def global_avg_pool_forward(x: Array) -> Array:
    _require_ndim(x, 5, "global_avg_pool input")
    return x.mean(axis=(2, 3, 4), dtype=np.float64).astype(x.dtype)


def global_avg_pool_backward(dout: Array, shape: Tuple[int, ...]) -> Array:
    vox = shape[2] * shape[3] * shape[4]
    return np.broadcast_to((dout / vox)[:, :, None, None, None], shape).astype(dout.dtype)


def dense_forward(x: Array, w: Array, b: Optional[Array]) -> Array:
    _require_ndim(x, 2, "dense input")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"dense: input width {x.shape[1]} does not match weights {w.shape}")
    out = x @ w
    return out + b if b is not None else out


def dense_backward(dout: Array, x: Array, w: Array) -> Tuple[Array, Array, Array]:
    """Returns (d input, d weights, d bias)."""
    return dout @ w.T, x.T @ dout, dout.sum(axis=0)


# -------------------------------
# Layers
# -------------------------------
class Layer:
    """A named, stateless layer. Parameters are looked up as f"{name}.{key}"."""

    def __init__(self, name: str):
        self.name = name

    def init_params(self, rng: np.random.Generator, dtype) -> Params:
        return {}

    def init_buffers(self, dtype) -> Params:
        return {}

    def forward(self, x: Array, params: Params, buffers: Params, train: bool) -> Tuple[Array, Any]:
        raise NotImplementedError

    def backward(self, dout: Array, cache: Any, params: Params) -> Tuple[Array, Grads]:
        raise NotImplementedError

    def key(self, suffix: str) -> str:
        return f"{self.name}.{suffix}"


def he_normal(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, dtype) -> Array:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv3d(Layer):
    def __init__(self, name: str, c_in: int, c_out: int, kernel: int, stride: int = 1,
                 padding: Optional[int] = None, zero_init: bool = False):
        super().__init__(name)
        self.c_in, self.c_out, self.kernel, self.stride = c_in, c_out, kernel, stride
        self.padding = kernel // 2 if padding is None else padding
        self.zero_init = zero_init

    def init_params(self, rng, dtype):
        shape = (self.c_out, self.c_in) + (self.kernel,) * 3
        if self.zero_init:
            return {self.key("weight"): np.zeros(shape, dtype=dtype)}
        return {self.key("weight"): he_normal(rng, shape, self.c_in * self.kernel ** 3, dtype)}

    def forward(self, x, params, buffers, train):
        return conv3d_forward(x, params[self.key("weight")], self.stride, self.padding), x

    def backward(self, dout, cache, params):
        dx, dw = conv3d_backward(dout, cache, params[self.key("weight")], self.stride, self.padding)
        return dx, {self.key("weight"): dw}


class BatchNorm(Layer):
    def __init__(self, name: str, channels: int, eps: float = BN_EPS, momentum: float = BN_MOMENTUM):
        super().__init__(name)
        self.channels, self.eps, self.momentum = channels, eps, momentum

    def init_params(self, rng, dtype):
        return {self.key("gamma"): np.ones(self.channels, dtype=dtype),
                self.key("beta"): np.zeros(self.channels, dtype=dtype)}

    def init_buffers(self, dtype):
        return {self.key("running_mean"): np.zeros(self.channels, dtype=dtype),
                self.key("running_var"): np.ones(self.channels, dtype=dtype)}

    def forward(self, x, params, buffers, train):
        return batchnorm_forward(x, params[self.key("gamma")], params[self.key("beta")],
                                 buffers[self.key("running_mean")], buffers[self.key("running_var")],
                                 train, self.eps, self.momentum)

    def backward(self, dout, cache, params):
        dx, dgamma, dbeta = batchnorm_backward(dout, cache)
        return dx, {self.key("gamma"): dgamma, self.key("beta"): dbeta}


class ReLU(Layer):
    def forward(self, x, params, buffers, train):
        return relu_forward(x), x

    def backward(self, dout, cache, params):
        return relu_backward(dout, cache), {}


class MaxPool3d(Layer):
    def __init__(self, name: str, kernel: int):
        super().__init__(name)
        self.kernel = kernel

    def forward(self, x, params, buffers, train):
        return maxpool3d_forward(x, self.kernel)

    def backward(self, dout, cache, params):
        return maxpool3d_backward(dout, cache), {}


class GlobalAvgPool3d(Layer):
    def forward(self, x, params, buffers, train):
        return global_avg_pool_forward(x), x.shape

    def backward(self, dout, cache, params):
        return global_avg_pool_backward(dout, cache), {}


class Dense(Layer):
    def __init__(self, name: str, n_in: int, n_out: int, bias: bool = True):
        super().__init__(name)
        self.n_in, self.n_out, self.bias = n_in, n_out, bias

    def init_params(self, rng, dtype):
        params = {self.key("weight"): he_normal(rng, (self.n_in, self.n_out), self.n_in, dtype)}
        if self.bias:
            params[self.key("bias")] = np.zeros(self.n_out, dtype=dtype)
        return params

    def forward(self, x, params, buffers, train):
        b = params[self.key("bias")] if self.bias else None
        return dense_forward(x, params[self.key("weight")], b), x

    def backward(self, dout, cache, params):
        dx, dw, db = dense_backward(dout, cache, params[self.key("weight")])
        grads = {self.key("weight"): dw}
        if self.bias:
            grads[self.key("bias")] = db
        return dx, grads


class Sequential(Layer):
    """Runs sub-layers in order; checks activations for NaN/Inf after each one."""

    def __init__(self, name: str, layers: Sequence[Layer]):
        super().__init__(name)
        self.layers = list(layers)

    def init_params(self, rng, dtype):
        params: Params = {}
        for layer in self.layers:
            params.update(layer.init_params(rng, dtype))
        return params

    def init_buffers(self, dtype):
        buffers: Params = {}
        for layer in self.layers:
            buffers.update(layer.init_buffers(dtype))
        return buffers

    def forward(self, x, params, buffers, train):
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x, params, buffers, train)
            check_finite(x, layer.name)
            caches.append(cache)
        return x, caches

    def backward(self, dout, cache, params):
        grads: Grads = {}
        for layer, c in zip(reversed(self.layers), reversed(cache)):
            dout, g = layer.backward(dout, c, params)
            grads.update(g)
        return dout, grads


class ResidualBlock(Layer):
    """Bottleneck block: relu(x + F(x)), F = 1x1-bn-relu, 3x3-bn-relu, 1x1-bn.

    In and out channels are equal, so the shortcut is the identity."""

    def __init__(self, name: str, channels: int, inner: int, zero_init: bool = False):
        super().__init__(name)
        self.body = Sequential(name, [
            Conv3d(f"{name}.conv_a", channels, inner, 1),
            BatchNorm(f"{name}.bn_a", inner),
            ReLU(f"{name}.relu_a"),
            Conv3d(f"{name}.conv_b", inner, inner, 3),
            BatchNorm(f"{name}.bn_b", inner),
            ReLU(f"{name}.relu_b"),
            Conv3d(f"{name}.conv_c", inner, channels, 1, zero_init=zero_init),
            BatchNorm(f"{name}.bn_c", channels),
        ])

    def init_params(self, rng, dtype):
        return self.body.init_params(rng, dtype)

    def init_buffers(self, dtype):
        return self.body.init_buffers(dtype)

    def forward(self, x, params, buffers, train):
        h, body_cache = self.body.forward(x, params, buffers, train)
        y = x + h
        return relu_forward(y), (body_cache, y)

    def backward(self, dout, cache, params):
        body_cache, y = cache
        dy = relu_backward(dout, y)
        dx_body, grads = self.body.backward(dy, body_cache, params)
        return dy + dx_body, grads


# -------------------------------
# Adam (L2 weight decay added to the raw gradient)
# -------------------------------
@dataclass
class AdamState:
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    t: int = 0
    m: Dict[str, Array] = field(default_factory=dict)
    v: Dict[str, Array] = field(default_factory=dict)

    def copy(self) -> "AdamState":
        return AdamState(self.lr, self.beta1, self.beta2, self.eps, self.weight_decay, self.t,
                         {k: a.copy() for k, a in self.m.items()},
                         {k: a.copy() for k, a in self.v.items()})


def adam_step(params: Params, grads: Grads, state: AdamState) -> Params:
    """Updates params in place (and returns them). Missing grads count as zero."""
    for name, g in grads.items():
        if name not in params:
            raise ShapeError(f"adam: gradient for unknown parameter {name}")
        if g.shape != params[name].shape:
            raise ShapeError(f"adam: gradient shape {g.shape} != parameter shape {params[name].shape} for {name}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name in sorted(params):
        theta = params[name]
        g = grads.get(name)
        g = np.zeros_like(theta) if g is None else g.astype(theta.dtype)
        if state.weight_decay:
            g = g + state.weight_decay * theta
        m = state.m.setdefault(name, np.zeros_like(theta))
        v = state.v.setdefault(name, np.zeros_like(theta))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        theta -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(theta.dtype)
    return params


# -------------------------------
# finite differences
# -------------------------------
def numerical_gradient(f: Callable[[], float], x: Array, h: float = 1e-3) -> Array:
    """Central differences of scalar f() w.r.t. every entry of x (perturbed in place)."""
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic: Array, numeric: Array) -> float:
    num = np.linalg.norm(np.ravel(analytic) - np.ravel(numeric))
    den = max(np.linalg.norm(np.ravel(analytic)) + np.linalg.norm(np.ravel(numeric)), 1e-12)
    return float(num / den)


def parameter_count(params: Params) -> int:
    return int(sum(p.size for p in params.values()))


def add_grads(into: Grads, other: Grads) -> Grads:
    for k, g in other.items():
        if k in into:
            into[k] = into[k] + g
        else:
            into[k] = g
    return into
