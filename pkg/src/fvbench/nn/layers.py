"""Layer kinds for the minimal embedding-network engine.

Each layer is immutable after construction and stateless across calls:
``forward`` returns ``(output, cache)`` and ``backward`` consumes that cache,
so the same layer object is safe to use from many threads at once.

Supported kinds are closed by design: dense, conv2d, relu, avgpool2d,
flatten, l2normalize. Activations flow as float64 arrays with an explicit
batch axis; images are laid out ``(n, h, w, c)`` and feature vectors
``(n, d)``.
"""

import warnings

import numpy as np

from ..errors import DegenerateEmbeddingWarning, ShapeError


class Dense:
    """Fully connected layer ``y = x @ weight + bias``."""

    kind = "dense"

    def __init__(self, weight, bias):
        self.weight = np.ascontiguousarray(weight, dtype=np.float64)
        self.bias = np.ascontiguousarray(bias, dtype=np.float64)
        if self.weight.ndim != 2:
            raise ShapeError("dense weight must be 2-D (in, out)")
        if self.bias.shape != (self.weight.shape[1],):
            raise ShapeError("dense bias must match weight output dim")

    def out_shape(self, in_shape):
        if len(in_shape) != 1:
            raise ShapeError("dense expects a flat feature input")
        if in_shape[0] != self.weight.shape[0]:
            raise ShapeError(
                f"dense expects {self.weight.shape[0]} inputs, got {in_shape[0]}"
            )
        return (self.weight.shape[1],)

    def forward(self, x):
        return x @ self.weight + self.bias, x

    def backward(self, cache, grad_out):
        x = cache
        grad_x = grad_out @ self.weight.T
        return grad_x, [x.T @ grad_out, grad_out.sum(axis=0)]

    def param_arrays(self):
        return [self.weight, self.bias]

    def spec_entries(self):
        return {"in": self.weight.shape[0], "out": self.weight.shape[1]}


class Conv2d:
    """2-D convolution with zero padding.

    Weight layout is ``(kh, kw, c_in, c_out)``. The forward pass runs as
    kh*kw strided matmuls, which keeps the summation order fixed and the
    output bit-reproducible.
    """

    kind = "conv2d"

    def __init__(self, weight, bias, stride=1, padding=0):
        self.weight = np.ascontiguousarray(weight, dtype=np.float64)
        self.bias = np.ascontiguousarray(bias, dtype=np.float64)
        if self.weight.ndim != 4:
            raise ShapeError("conv2d weight must be 4-D (kh, kw, c_in, c_out)")
        if self.bias.shape != (self.weight.shape[3],):
            raise ShapeError("conv2d bias must match output channels")
        if stride < 1 or padding < 0:
            raise ShapeError("conv2d stride must be >= 1 and padding >= 0")
        self.stride = int(stride)
        self.padding = int(padding)

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError("conv2d expects (h, w, c) input")
        h, w, c = in_shape
        kh, kw, c_in, c_out = self.weight.shape
        if c != c_in:
            raise ShapeError(f"conv2d expects {c_in} input channels, got {c}")
        oh = (h + 2 * self.padding - kh) // self.stride + 1
        ow = (w + 2 * self.padding - kw) // self.stride + 1
        if oh < 1 or ow < 1:
            raise ShapeError("conv2d kernel larger than padded input")
        return (oh, ow, c_out)

    def _pad(self, x):
        p = self.padding
        if p == 0:
            return x
        return np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))

    def forward(self, x):
        kh, kw, _, c_out = self.weight.shape
        s = self.stride
        oh, ow, _ = self.out_shape(x.shape[1:])
        xp = self._pad(x)
        y = np.zeros((x.shape[0], oh, ow, c_out))
        for ki in range(kh):
            for kj in range(kw):
                window = xp[:, ki : ki + oh * s : s, kj : kj + ow * s : s, :]
                y += window @ self.weight[ki, kj]
        y += self.bias
        return y, (x.shape, xp)

    def backward(self, cache, grad_out):
        in_shape, xp = cache
        kh, kw, _, _ = self.weight.shape
        s = self.stride
        p = self.padding
        oh, ow = grad_out.shape[1], grad_out.shape[2]
        grad_xp = np.zeros_like(xp)
        grad_w = np.zeros_like(self.weight)
        for ki in range(kh):
            for kj in range(kw):
                window = xp[:, ki : ki + oh * s : s, kj : kj + ow * s : s, :]
                grad_w[ki, kj] = np.einsum("nijc,nijo->co", window, grad_out)
                grad_xp[:, ki : ki + oh * s : s, kj : kj + ow * s : s, :] += (
                    grad_out @ self.weight[ki, kj].T
                )
        grad_b = grad_out.sum(axis=(0, 1, 2))
        if p:
            grad_x = grad_xp[:, p : p + in_shape[1], p : p + in_shape[2], :]
        else:
            grad_x = grad_xp
        return grad_x, [grad_w, grad_b]

    def param_arrays(self):
        return [self.weight, self.bias]

    def spec_entries(self):
        kh, kw, c_in, c_out = self.weight.shape
        return {
            "kh": kh,
            "kw": kw,
            "c_in": c_in,
            "c_out": c_out,
            "stride": self.stride,
            "padding": self.padding,
        }


class ReLU:
    kind = "relu"

    def out_shape(self, in_shape):
        return tuple(in_shape)

    def forward(self, x):
        mask = x > 0
        return np.where(mask, x, 0.0), mask

    def backward(self, cache, grad_out):
        return np.where(cache, grad_out, 0.0), []

    def param_arrays(self):
        return []

    def spec_entries(self):
        return {}


class AvgPool2d:
    """Average pooling; stride defaults to the window size (non-overlapping)."""

    kind = "avgpool2d"

    def __init__(self, size, stride=None):
        if size < 1:
            raise ShapeError("avgpool2d size must be >= 1")
        self.size = int(size)
        self.stride = int(stride) if stride is not None else int(size)
        if self.stride < 1:
            raise ShapeError("avgpool2d stride must be >= 1")

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError("avgpool2d expects (h, w, c) input")
        h, w, c = in_shape
        oh = (h - self.size) // self.stride + 1
        ow = (w - self.size) // self.stride + 1
        if oh < 1 or ow < 1:
            raise ShapeError("avgpool2d window larger than input")
        return (oh, ow, c)

    def forward(self, x):
        k, s = self.size, self.stride
        oh, ow, _ = self.out_shape(x.shape[1:])
        y = np.zeros((x.shape[0], oh, ow, x.shape[3]))
        for ki in range(k):
            for kj in range(k):
                y += x[:, ki : ki + oh * s : s, kj : kj + ow * s : s, :]
        y /= k * k
        return y, x.shape

    def backward(self, cache, grad_out):
        k, s = self.size, self.stride
        oh, ow = grad_out.shape[1], grad_out.shape[2]
        grad_x = np.zeros(cache)
        share = grad_out / (k * k)
        for ki in range(k):
            for kj in range(k):
                grad_x[:, ki : ki + oh * s : s, kj : kj + ow * s : s, :] += share
        return grad_x, []

    def param_arrays(self):
        return []

    def spec_entries(self):
        return {"size": self.size, "stride": self.stride}


class Flatten:
    kind = "flatten"

    def out_shape(self, in_shape):
        n = 1
        for d in in_shape:
            n *= d
        return (n,)

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, cache, grad_out):
        return grad_out.reshape(cache), []

    def param_arrays(self):
        return []

    def spec_entries(self):
        return {}


class L2Normalize:
    """Projects feature vectors onto the unit sphere.

    A zero input vector maps to the zero vector with zero gradient; that case
    is flagged with DegenerateEmbeddingWarning instead of propagating NaNs.
    """

    kind = "l2normalize"

    def out_shape(self, in_shape):
        if len(in_shape) != 1:
            raise ShapeError("l2normalize expects a flat feature input")
        return tuple(in_shape)

    def forward(self, x):
        norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
        degenerate = norms == 0.0
        if degenerate.any():
            warnings.warn(
                "zero pre-normalization feature vector", DegenerateEmbeddingWarning
            )
        safe = np.where(degenerate, 1.0, norms)
        y = x / safe
        return y, (y, safe, degenerate)

    def backward(self, cache, grad_out):
        y, safe, degenerate = cache
        inner = (y * grad_out).sum(axis=1, keepdims=True)
        grad_x = (grad_out - y * inner) / safe
        if degenerate.any():
            grad_x = np.where(degenerate, 0.0, grad_x)
        return grad_x, []

    def param_arrays(self):
        return []

    def spec_entries(self):
        return {}


LAYER_KINDS = {
    "dense": Dense,
    "conv2d": Conv2d,
    "relu": ReLU,
    "avgpool2d": AvgPool2d,
    "flatten": Flatten,
    "l2normalize": L2Normalize,
}
