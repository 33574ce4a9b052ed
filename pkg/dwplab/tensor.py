"""
Reverse-mode differentiation over numpy arrays.

A `Tensor` wraps a float32 or float64 ndarray and remembers the `Function`
that produced it. `Tensor.backward` walks that tape in reverse topological
order and accumulates gradients on every tensor that requires them. The
operation set is deliberately small: what the four victim architectures,
the diverse-input transform and cross-entropy training need.
"""

import logging
from typing import Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import RejectedInputError

logger = logging.getLogger(__name__)

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class Function:
    """
    Base class for differentiable operations.

    Subclasses implement `forward` on raw arrays and `backward`, which maps
    the gradient of the output to one gradient (or None) per input tensor.
    """

    def __init__(self, *tensors):
        self.tensors = tensors

    def forward(self, *arrays, **kwargs):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    @classmethod
    def apply(cls, *tensors, **kwargs):
        """Run the forward pass and wire the result into the tape."""
        func = cls(*tensors)
        out = func.forward(*(t.data for t in tensors), **kwargs)
        requires_grad = any(t.requires_grad for t in tensors)
        return Tensor(out, creator=func if requires_grad else None, requires_grad=requires_grad)


def unbroadcast(grad, shape):
    """Sum out the axes numpy broadcasting added or stretched."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """
    Dense row-major array with an optional gradient tape.

    Attributes:
        data: the ndarray (float32 or float64)
        requires_grad: whether gradients flow into this tensor
        grad: accumulated gradient after `backward`, same shape as data
        creator: the Function that produced this tensor, None for leaves
    """

    def __init__(self, data, creator=None, requires_grad=False, dtype=None):
        array = np.asarray(data, dtype=dtype)
        if array.dtype not in FLOAT_DTYPES:
            array = array.astype(np.float32)
        self.data = array
        self.creator = creator
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def _constant(self, value):
        if isinstance(value, Tensor):
            return value
        return Tensor(np.asarray(value, dtype=self.dtype))

    def __add__(self, other):
        return Add.apply(self, self._constant(other))

    __radd__ = __add__

    def __sub__(self, other):
        return Add.apply(self, Neg.apply(self._constant(other)))

    def __neg__(self):
        return Neg.apply(self)

    def __mul__(self, other):
        return Mul.apply(self, self._constant(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("Division by a Tensor is not supported")
        return Mul.apply(self, self._constant(1.0 / other))

    def relu(self):
        return Relu.apply(self)

    def reshape(self, *shape):
        return Reshape.apply(self, shape=shape)

    def sum(self):
        return Sum.apply(self)

    def backward(self, grad=None):
        """
        Accumulate d(self)/d(leaf) on every tensor of the tape.

        Args:
            grad: upstream gradient with the shape of self; ones when omitted
        """
        if not self.requires_grad:
            return
        if grad is None:
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.dtype)
        if grad.shape != self.shape:
            raise RejectedInputError(
                f"Upstream gradient shape {grad.shape} does not match tensor shape {self.shape}"
            )

        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if id(node) in visited:
                continue
            if expanded:
                visited.add(id(node))
                order.append(node)
                continue
            stack.append((node, True))
            if node.creator is not None:
                for parent in node.creator.tensors:
                    if parent.requires_grad and id(parent) not in visited:
                        stack.append((parent, False))

        self._accumulate(grad)
        for node in reversed(order):
            if node.creator is None or node.grad is None:
                continue
            grads = node.creator.backward(node.grad)
            if not isinstance(grads, tuple):
                grads = (grads,)
            for parent, parent_grad in zip(node.creator.tensors, grads):
                if parent.requires_grad and parent_grad is not None:
                    parent._accumulate(parent_grad)

        # Free the tape; gradients stay on the tensors.
        for node in order:
            node.creator = None

    def _accumulate(self, grad):
        grad = np.asarray(grad, dtype=self.dtype)
        if self.grad is None:
            self.grad = grad.copy()
        else:
            self.grad = self.grad + grad


########### Elementwise ###########

class Add(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad):
        return unbroadcast(grad, self.shapes[0]), unbroadcast(grad, self.shapes[1])


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, grad):
        return -grad


class Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return unbroadcast(grad * self.b, self.a.shape), unbroadcast(grad * self.a, self.b.shape)


class Relu(Function):
    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, np.zeros((), dtype=x.dtype))

    def backward(self, grad):
        return np.where(self.mask, grad, np.zeros((), dtype=grad.dtype))


class Sum(Function):
    def forward(self, x):
        self.shape = x.shape
        return np.asarray(x.sum(), dtype=x.dtype)

    def backward(self, grad):
        return np.broadcast_to(grad, self.shape).copy()


class Reshape(Function):
    def forward(self, x, shape):
        self.shape = x.shape
        return x.reshape(shape)

    def backward(self, grad):
        return grad.reshape(self.shape)


class Concat(Function):
    def forward(self, *arrays, axis=1):
        self.axis = axis
        self.sizes = [a.shape[axis] for a in arrays]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        splits = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, splits, axis=self.axis))


def concat(tensors: Sequence[Tensor], axis=1):
    return Concat.apply(*tensors, axis=axis)


########### Dense and convolution ###########

class Linear(Function):
    """y = x @ w.T + b with w of shape (out, in)."""

    def forward(self, x, w, b):
        self.x, self.w = x, w
        return x @ w.T + b

    def backward(self, grad):
        return grad @ self.w, grad.T @ self.x, grad.sum(axis=0)


def linear(x, w, b):
    return Linear.apply(x, w, b)


class Conv2d(Function):
    """
    2-D cross-correlation over NCHW input, OIHW kernel, zero padding.

    The forward pass gathers sliding windows (im2col without the copy) and
    contracts them with the kernel; the input gradient scatters the
    window gradients back one kernel tap at a time.
    """

    def forward(self, x, w, b, stride=1, padding=0):
        self.x_shape = x.shape
        self.stride, self.padding = stride, padding
        self.w = w
        kh, kw = w.shape[2], w.shape[3]
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
        self.padded_shape = xp.shape
        windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        self.windows = windows
        out = np.tensordot(windows, w, axes=([1, 4, 5], [1, 2, 3]))  # N, Ho, Wo, O
        return np.ascontiguousarray(out.transpose(0, 3, 1, 2)) + b[None, :, None, None]

    def backward(self, grad):
        s, p = self.stride, self.padding
        _, _, ho, wo = grad.shape
        kh, kw = self.w.shape[2], self.w.shape[3]
        grad_w = np.tensordot(grad, self.windows, axes=([0, 2, 3], [0, 2, 3]))
        grad_b = grad.sum(axis=(0, 2, 3))
        cols = np.tensordot(grad, self.w, axes=([1], [0]))  # N, Ho, Wo, C, kh, kw
        grad_xp = np.zeros(self.padded_shape, dtype=grad.dtype)
        for i in range(kh):
            for j in range(kw):
                grad_xp[:, :, i:i + s * ho:s, j:j + s * wo:s] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        h, w = self.x_shape[2], self.x_shape[3]
        grad_x = grad_xp[:, :, p:p + h, p:p + w] if p else grad_xp
        return grad_x, grad_w, grad_b


def conv2d(x, w, b, stride=1, padding=0):
    return Conv2d.apply(x, w, b, stride=stride, padding=padding)


########### Pooling ###########

class MaxPool2x2(Function):
    """2x2 max pooling, stride 2; odd trailing rows/columns are dropped."""

    def forward(self, x):
        n, c, h, w = x.shape
        ho, wo = h // 2, w // 2
        self.x_shape = x.shape
        blocks = x[:, :, :2 * ho, :2 * wo].reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5)
        blocks = blocks.reshape(n, c, ho, wo, 4)
        self.argmax = blocks.argmax(axis=-1)
        return np.take_along_axis(blocks, self.argmax[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        n, c, h, w = self.x_shape
        ho, wo = h // 2, w // 2
        blocks = np.zeros((n, c, ho, wo, 4), dtype=grad.dtype)
        np.put_along_axis(blocks, self.argmax[..., None], grad[..., None], axis=-1)
        blocks = blocks.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo)
        grad_x = np.zeros(self.x_shape, dtype=grad.dtype)
        grad_x[:, :, :2 * ho, :2 * wo] = blocks
        return grad_x


class AvgPool2x2(Function):
    def forward(self, x):
        n, c, h, w = x.shape
        ho, wo = h // 2, w // 2
        self.x_shape = x.shape
        blocks = x[:, :, :2 * ho, :2 * wo].reshape(n, c, ho, 2, wo, 2)
        return blocks.mean(axis=(3, 5))

    def backward(self, grad):
        n, c, h, w = self.x_shape
        ho, wo = h // 2, w // 2
        spread = np.repeat(np.repeat(grad, 2, axis=2), 2, axis=3) * grad.dtype.type(0.25)
        grad_x = np.zeros(self.x_shape, dtype=grad.dtype)
        grad_x[:, :, :2 * ho, :2 * wo] = spread
        return grad_x


class GlobalAvgPool(Function):
    def forward(self, x):
        self.x_shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, grad):
        h, w = self.x_shape[2], self.x_shape[3]
        return np.broadcast_to(grad[:, :, None, None] / grad.dtype.type(h * w), self.x_shape).copy()


########### Resampling ###########

def bilinear_matrix(out_size, in_size, dtype=np.float64):
    """
    Interpolation matrix R with y = R @ x resampling a length-in_size signal
    to out_size samples (half-pixel centres, edge clamped). Equal sizes give
    the identity exactly.
    """
    matrix = np.zeros((out_size, in_size), dtype=np.float64)
    scale = in_size / out_size
    for i in range(out_size):
        src = min(max((i + 0.5) * scale - 0.5, 0.0), in_size - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, in_size - 1)
        frac = src - lo
        matrix[i, lo] += 1.0 - frac
        matrix[i, hi] += frac
    return matrix.astype(dtype)


class ResizePad(Function):
    """
    Per-sample bilinear shrink to s x s followed by zero padding back to the
    original H x W canvas at offset (top, left).

    `plans` holds one (size, top, left) triple per sample, or None to pass
    the sample through untouched. The adjoint crops the canvas and applies
    the transposed interpolation matrices.
    """

    def forward(self, x, plans):
        n, c, h, w = x.shape
        self.plans = plans
        self.mats = []
        out = np.zeros_like(x)
        for k, plan in enumerate(plans):
            if plan is None:
                out[k] = x[k]
                self.mats.append(None)
                continue
            size, top, left = plan
            rows = bilinear_matrix(size, h, x.dtype)
            cols = bilinear_matrix(size, w, x.dtype)
            self.mats.append((rows, cols))
            out[k, :, top:top + size, left:left + size] = rows @ x[k] @ cols.T
        return out

    def backward(self, grad):
        grad_x = np.zeros_like(grad)
        for k, plan in enumerate(self.plans):
            if plan is None:
                grad_x[k] = grad[k]
                continue
            size, top, left = plan
            rows, cols = self.mats[k]
            grad_x[k] = rows.T @ grad[k, :, top:top + size, left:left + size] @ cols
        return grad_x


def resize_pad(x, plans):
    return ResizePad.apply(x, plans=plans)


def upsample_bilinear(image, height, width):
    """Bilinearly resample a 2-D array to (height, width)."""
    rows = bilinear_matrix(height, image.shape[0], image.dtype)
    cols = bilinear_matrix(width, image.shape[1], image.dtype)
    return rows @ image @ cols.T


########### Losses ###########

class CrossEntropy(Function):
    """Mean softmax cross-entropy of logits against integer labels."""

    def forward(self, logits, labels):
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        log_probs = shifted - log_norm
        self.probs = np.exp(log_probs)
        self.labels = labels
        n = logits.shape[0]
        return np.asarray(-log_probs[np.arange(n), labels].mean(), dtype=logits.dtype)

    def backward(self, grad):
        n = self.probs.shape[0]
        delta = self.probs.copy()
        delta[np.arange(n), self.labels] -= 1.0
        return delta * (grad / n)


def cross_entropy(logits, labels):
    return CrossEntropy.apply(logits, labels=np.asarray(labels, dtype=np.int64))
