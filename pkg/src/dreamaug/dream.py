"""Channel statistics, AdaIN, and the feature-norm ascent that produces dream images.

All images here live in normalized space (per-channel ``(v - mean) / std``);
the valid box for pixels is therefore per-channel, see :func:`bounds_from_normalization`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DataError, DimensionError, NumericError
from .model import Model

SKIP = -1  # partner sentinel: the class has no other member, keep x unchanged


@dataclass
class ChannelStats:
    mean: np.ndarray  # [N, D]
    std: np.ndarray  # [N, D]


@dataclass
class DreamConfig:
    alpha: float = 0.3
    iterations: int = 1
    eps: float = 1e-5
    noise_bound: float = 0.0
    lower_bound: tuple = (0.0, 0.0, 0.0)
    upper_bound: tuple = (1.0, 1.0, 1.0)
    standardize_grad: bool = True
    mode: str = "stylized"
    variance_ddof: int = 0

    def validate(self) -> None:
        if self.iterations < 0:
            raise ConfigError(f"iterations must be >= 0, got {self.iterations}")
        if self.iterations > 0 and not self.alpha > 0:
            raise ConfigError(f"alpha must be > 0 when iterations > 0, got {self.alpha}")
        if self.noise_bound < 0:
            raise ConfigError(f"noise_bound must be >= 0, got {self.noise_bound}")
        if self.eps < 0:
            raise ConfigError(f"eps must be >= 0, got {self.eps}")
        if len(self.lower_bound) != len(self.upper_bound):
            raise ConfigError("lower_bound and upper_bound must have one entry per channel")
        if any(not lo < hi for lo, hi in zip(self.lower_bound, self.upper_bound)):
            raise ConfigError("lower_bound must be strictly below upper_bound for every channel")
        if self.mode not in ("stylized", "deepdream"):
            raise ConfigError(f"mode must be 'stylized' or 'deepdream', got {self.mode!r}")
        if self.variance_ddof not in (0, 1):
            raise ConfigError(f"variance_ddof must be 0 or 1, got {self.variance_ddof}")


def bounds_from_normalization(mean: Sequence[float], std: Sequence[float]) -> tuple:
    """Image of the raw [0, 1] box under per-channel normalization."""
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    return tuple((-mean / std).tolist()), tuple(((1.0 - mean) / std).tolist())


def _moments(z: ad.Tensor, ddof: int):
    mu = ad.mean(z, axis=(2, 3), keepdims=True)
    centered = z - mu
    count = z.shape[2] * z.shape[3]
    var = ad.tsum(centered * centered, axis=(2, 3), keepdims=True) * (1.0 / (count - ddof))
    return mu, centered, ad.sqrt(var)


def channel_stats(z, ddof: int = 0) -> ChannelStats:
    """Per-sample, per-channel mean and standard deviation over the spatial axes.

    ``ddof=0`` is the population divisor H*W.
    """
    data = z.data if isinstance(z, ad.Tensor) else np.asarray(z, dtype=np.float64)
    if data.ndim != 4:
        raise DimensionError(f"channel_stats expects [N, D, H, W], got {list(data.shape)}")
    if data.shape[2] * data.shape[3] <= ddof:
        raise DimensionError("channel_stats needs more spatial cells than ddof")
    mean = data.mean(axis=(2, 3))
    centered = data - mean[:, :, None, None]
    var = (centered * centered).sum(axis=(2, 3)) / (data.shape[2] * data.shape[3] - ddof)
    return ChannelStats(mean, np.sqrt(var))


def adain(content: ad.Tensor, style, eps: float = 1e-5, ddof: int = 0) -> ad.Tensor:
    """Re-align each content channel to the style channel's mean and std.

    Differentiable with respect to ``content`` only; style statistics are constants.
    """
    style_data = style.data if isinstance(style, ad.Tensor) else np.asarray(style, dtype=np.float64)
    if content.shape != style_data.shape:
        raise DimensionError(f"adain: content {list(content.shape)} vs style {list(style_data.shape)}")
    s = channel_stats(style_data, ddof)
    _, centered, sigma = _moments(content, ddof)
    denom = sigma + eps
    if eps == 0:
        # constant channel: centered content is exactly 0, any finite scale works
        denom = denom + ad.Tensor((sigma.data == 0).astype(np.float64))
    scale = ad.Tensor(s.std[:, :, None, None]) / denom
    return centered * scale + ad.Tensor(s.mean[:, :, None, None])


def _per_sample_objective(model: Model, x: ad.Tensor, style_features: Optional[np.ndarray],
                          eps: float, ddof: int) -> ad.Tensor:
    z = model.extract_features(x)
    if style_features is not None:
        z = adain(z, style_features, eps, ddof)
    return ad.frobenius_norm(z, axis=(1, 2, 3))


def dream_loss(model: Model, x: ad.Tensor, x_style: ad.Tensor, eps: float = 1e-5, ddof: int = 0) -> ad.Tensor:
    """Frobenius norm of the style-aligned feature map, summed over the batch.

    Each sample contributes its own norm, so the gradient for one image does
    not depend on the rest of the batch.
    """
    if x.shape != x_style.shape:
        raise DimensionError(f"dream_loss: x {list(x.shape)} vs x_style {list(x_style.shape)}")
    style_features = model.extract_features(x_style.detach()).data
    return ad.tsum(_per_sample_objective(model, x, style_features, eps, ddof))


def deepdream_loss(model: Model, x: ad.Tensor) -> ad.Tensor:
    return ad.tsum(ad.frobenius_norm(model.extract_features(x), axis=(1, 2, 3)))


def _standardize(grad: np.ndarray) -> np.ndarray:
    out = np.empty_like(grad)
    for i, g in enumerate(grad):
        s = g.std(ddof=1)
        # constant gradient: fall back to the raw step
        out[i] = g if s == 0 else (g - g.mean()) / s
    return out


RngArg = Union[None, np.random.Generator, Sequence[np.random.Generator]]


def _init_noise(shape: tuple, bound: float, rng: RngArg) -> np.ndarray:
    if rng is None:
        raise ConfigError("noise_bound > 0 requires a random stream")
    if isinstance(rng, np.random.Generator):
        return rng.uniform(-bound, bound, size=shape)
    if len(rng) != shape[0]:
        raise ConfigError(f"got {len(rng)} per-sample streams for a batch of {shape[0]}")
    return np.stack([g.uniform(-bound, bound, size=shape[1:]) for g in rng])


def stylized_dream(model: Model, x, x_style, cfg: DreamConfig, rng: RngArg = None,
                   trace: Optional[list] = None) -> np.ndarray:
    """Projected gradient ascent on the dream loss, starting from ``x``.

    ``rng`` is one generator for the whole batch or one per sample; it is only
    consumed when ``cfg.noise_bound > 0``. If ``trace`` is a list, the
    objective value of every iterate (including the start) is appended.
    Returns a fresh array with no link to any gradient graph.
    """
    cfg.validate()
    x = np.asarray(x.data if isinstance(x, ad.Tensor) else x, dtype=np.float64)
    xs = np.asarray(x_style.data if isinstance(x_style, ad.Tensor) else x_style, dtype=np.float64)
    if x.shape != xs.shape:
        raise DimensionError(f"stylized_dream: x {list(x.shape)} vs x_style {list(xs.shape)}")
    if x.ndim != 4 or x.shape[1] != len(cfg.lower_bound):
        raise DimensionError(f"stylized_dream: expected [N, {len(cfg.lower_bound)}, H, W], got {list(x.shape)}")
    lower = np.asarray(cfg.lower_bound, dtype=np.float64)[:, None, None]
    upper = np.asarray(cfg.upper_bound, dtype=np.float64)[:, None, None]

    cur = x
    if cfg.noise_bound > 0:
        cur = np.clip(x + _init_noise(x.shape, cfg.noise_bound, rng), lower, upper)
    if cfg.iterations == 0 and trace is None:
        return cur.copy()

    stylized = cfg.mode == "stylized"
    style_features = model.extract_features(ad.Tensor(xs)).data if stylized else None
    for _ in range(cfg.iterations):
        xt = ad.Tensor(cur, requires_grad=True)
        per_sample = _per_sample_objective(model, xt, style_features, cfg.eps, cfg.variance_ddof)
        if trace is not None:
            trace.append(per_sample.data.copy())
        ad.tsum(per_sample).backward()
        grad = xt.grad
        if not np.isfinite(grad).all():
            raise NumericError("non-finite gradient during dream ascent")
        if cfg.standardize_grad:
            grad = _standardize(grad)
        cur = np.clip(cur + cfg.alpha * grad, lower, upper)
    if trace is not None:
        final = _per_sample_objective(model, ad.Tensor(cur), style_features, cfg.eps, cfg.variance_ddof)
        trace.append(final.data.copy())
    return cur.copy()


def build_class_index(labels: Sequence[int], num_classes: int) -> list:
    """Sorted member indices for each class."""
    labels = np.asarray(labels)
    return [np.flatnonzero(labels == c) for c in range(num_classes)]


def sample_style_partner(indices: Sequence[int], labels: Sequence[int], class_index: list,
                         rng: np.random.Generator) -> np.ndarray:
    """For each query (dataset index, label) draw a different same-class index.

    Returns :data:`SKIP` where the class has a single member.
    """
    out = np.empty(len(indices), dtype=np.int64)
    for k, (idx, y) in enumerate(zip(indices, labels)):
        members = class_index[int(y)]
        if len(members) == 0:
            raise DataError(f"class {int(y)} has no images to draw a style partner from")
        pos = int(np.searchsorted(members, idx))
        present = pos < len(members) and members[pos] == idx
        if not present:
            out[k] = members[rng.integers(len(members))]
            continue
        if len(members) == 1:
            out[k] = SKIP
            continue
        r = int(rng.integers(len(members) - 1))
        out[k] = members[r + 1 if r >= pos else r]
    return out
