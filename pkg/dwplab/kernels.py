"""
Smoothing kernels and the depthwise convolution used for translation-invariant
gradient fusion.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage, stats

from .exceptions import ConfigError
from .tensor import Tensor

KERNEL_FAMILIES = ('gaussian', 'uniform', 'linear', 'delta')


@dataclass(frozen=True)
class KernelSpec:
    """
    Description of a separable smoothing kernel.

    Attributes:
        family: one of gaussian, uniform, linear, delta
        length: odd side length
        sigma: standard deviation in pixels (gaussian only)
    """
    family: str = 'gaussian'
    length: int = 5
    sigma: float = 3.0

    def __post_init__(self):
        if self.family not in KERNEL_FAMILIES:
            raise ConfigError(f"unknown kernel family {self.family!r}", 'family')
        if not isinstance(self.length, int) or self.length < 1 or self.length % 2 == 0:
            raise ConfigError(f"kernel length must be an odd positive integer, got {self.length!r}", 'length')
        if self.family == 'gaussian' and not self.sigma > 0:
            raise ConfigError(f"gaussian sigma must be positive, got {self.sigma!r}", 'sigma')

    def to_dict(self):
        return {'family': self.family, 'length': self.length, 'sigma': self.sigma}


def _profile(spec):
    offsets = np.arange(spec.length, dtype=np.float64) - spec.length // 2
    if spec.family == 'delta':
        return (offsets == 0).astype(np.float64)
    if spec.family == 'uniform':
        return np.ones(spec.length, dtype=np.float64)
    if spec.family == 'linear':
        return 1.0 - np.abs(offsets) / (spec.length // 2 + 1)
    return stats.norm.pdf(offsets, scale=spec.sigma)


def make_kernel(spec: KernelSpec) -> Tensor:
    """Materialize the outer product of the 1-D profile, normalized to sum 1."""
    profile = _profile(spec)
    kernel = np.outer(profile, profile)
    return Tensor(kernel / kernel.sum(), dtype=np.float64)


def depthwise_convolve(grad, kernel, mode='zero') -> Tensor:
    """
    Convolve every (sample, channel) plane of an NCHW array with `kernel`.

    Args:
        grad: Tensor or ndarray of shape (N, C, H, W)
        kernel: square kernel from `make_kernel`
        mode: 'zero' pads with zeros (the attack's setting); 'circular'
            wraps around and preserves each plane's sum (used by tests)

    Returns:
        Tensor with the same shape and dtype as `grad`.
    """
    data = grad.data if isinstance(grad, Tensor) else np.asarray(grad)
    weights = kernel.data if isinstance(kernel, Tensor) else np.asarray(kernel)
    if mode not in ('zero', 'circular'):
        raise ConfigError(f"unknown padding mode {mode!r}", 'mode')
    if weights.shape == (1, 1) and weights[0, 0] == 1.0:
        return Tensor(data.copy())
    boundary = 'constant' if mode == 'zero' else 'wrap'
    out = ndimage.convolve(data, weights[None, None].astype(data.dtype), mode=boundary, cval=0.0)
    return Tensor(out)
