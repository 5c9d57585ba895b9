"""Normalized residual maps, reconstruction losses, and anomaly maps/scores.

Feature tensors are ``(C, H, W)`` or batched ``(B, C, H, W)``. Loss functions
stay in torch so they can be differentiated; the anomaly-map path converts to
float64 numpy arrays.
"""

from __future__ import annotations

import math
from typing import List, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage
from torch import Tensor

from .errors import ConfigError, DomainError, NumericError, ShapeError

EPS = 1e-12
NORMALIZATIONS = ("location", "global")
LEVEL_SCALINGS = ("spatial", "channel_mean")


def normalize_level(f: Tensor, eps: float = EPS, mode: str = "location") -> Tensor:
    """L2-normalize a feature map.

    ``mode="location"`` divides the channel vector at every spatial position by
    its own norm (plus ``eps``); ``mode="global"`` divides the whole per-sample
    map by one norm, kept for ablations.
    """
    if not torch.isfinite(f).all():
        raise NumericError("feature map contains non-finite values")
    if f.ndim not in (3, 4):
        raise ShapeError(f"expected (C, H, W) or (B, C, H, W), got {tuple(f.shape)}")
    if mode == "location":
        norm = torch.linalg.vector_norm(f, dim=-3, keepdim=True)
    elif mode == "global":
        norm = torch.linalg.vector_norm(f, dim=(-3, -2, -1), keepdim=True)
    else:
        raise ConfigError(f"normalization must be one of {NORMALIZATIONS}, got {mode!r}")
    return f / (norm + eps)


def residual_map(f_enc_hat: Tensor, f_dec_hat: Tensor) -> Tensor:
    """Element-wise half squared difference of two normalized maps."""
    if f_enc_hat.shape != f_dec_hat.shape:
        raise ShapeError(f"shape mismatch: {tuple(f_enc_hat.shape)} vs {tuple(f_dec_hat.shape)}")
    return 0.5 * (f_enc_hat - f_dec_hat) ** 2


def residual_maps(
    encoded: Sequence[Tensor],
    decoded: Sequence[Tensor],
    eps: float = EPS,
    normalization: str = "location",
) -> List[Tensor]:
    if len(encoded) != len(decoded):
        raise ShapeError(f"{len(encoded)} encoded levels vs {len(decoded)} decoded levels")
    return [
        residual_map(normalize_level(e, eps, normalization), normalize_level(d, eps, normalization))
        for e, d in zip(encoded, decoded)
    ]


def level_loss(phi: Tensor) -> Tensor:
    """Sum over channels and positions divided by the spatial size ``H * W``.

    A batched input returns the mean of the per-sample losses.
    """
    if phi.numel() == 0:
        raise DomainError("level_loss of an empty residual map")
    h, w = phi.shape[-2:]
    per_sample = phi.sum(dim=(-3, -2, -1)) / (h * w)
    return per_sample.mean() if phi.ndim == 4 else per_sample


def total_loss(level_losses: Sequence[Union[Tensor, float]]) -> Tensor:
    """Arithmetic mean of the per-level losses."""
    if len(level_losses) == 0:
        raise DomainError("total_loss needs at least one level")
    return sum(torch.as_tensor(l) for l in level_losses) / len(level_losses)


def hierarchical_loss(
    encoded: Sequence[Tensor],
    decoded: Sequence[Tensor],
    eps: float = EPS,
    normalization: str = "location",
) -> Tuple[Tensor, List[Tensor]]:
    """Total training loss plus its per-level components."""
    levels = [level_loss(phi) for phi in residual_maps(encoded, decoded, eps, normalization)]
    return total_loss(levels), levels


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian truncated at radius ``ceil(4 * sigma)``."""
    if not sigma > 0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    radius = int(math.ceil(4.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(maps: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian smoothing over the last two axes, reflect padding."""
    k = gaussian_kernel1d(sigma)
    out = ndimage.correlate1d(np.asarray(maps, dtype=np.float64), k, axis=-1, mode="reflect")
    return ndimage.correlate1d(out, k, axis=-2, mode="reflect")


def _as_batched(phi) -> Tensor:
    t = torch.as_tensor(phi).detach().to(dtype=torch.float64, device="cpu")
    if t.ndim == 3:
        t = t.unsqueeze(0)
    if t.ndim != 4:
        raise ShapeError(f"residual map must be (C, H, W) or (B, C, H, W), got {tuple(t.shape)}")
    return t


def aggregate_anomaly_map(
    residuals: Sequence,
    target_size: Tuple[int, int],
    sigma: float = 4.0,
    level_scaling: str = "spatial",
) -> np.ndarray:
    """Combine per-level residual maps into a smoothed anomaly map at ``target_size``.

    Each level is summed over channels, scaled by ``1 / (H_k * W_k)``
    (``level_scaling="spatial"``) or ``1 / C_k`` (``"channel_mean"``),
    bilinearly resized to ``target_size = (H, W)`` with half-pixel centres,
    summed over levels and Gaussian-filtered.

    Returns:
        ``(H, W)`` array for unbatched residuals, ``(B, H, W)`` otherwise.
    """
    if len(residuals) == 0:
        raise DomainError("no residual maps to aggregate")
    if not sigma > 0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    if level_scaling not in LEVEL_SCALINGS:
        raise ConfigError(f"level_scaling must be one of {LEVEL_SCALINGS}, got {level_scaling!r}")
    unbatched = torch.as_tensor(residuals[0]).ndim == 3
    total = None
    for phi in residuals:
        t = _as_batched(phi)
        c, h, w = t.shape[1:]
        scale = 1.0 / (h * w) if level_scaling == "spatial" else 1.0 / c
        summed = t.sum(dim=1, keepdim=True) * scale
        resized = F.interpolate(summed, size=tuple(target_size), mode="bilinear", align_corners=False)
        total = resized if total is None else total + resized
    out = gaussian_blur(total[:, 0].numpy(), sigma)
    return out[0] if unbatched else out


def anomaly_score(anomaly_map: np.ndarray) -> Union[float, np.ndarray]:
    """Maximum of the anomaly map (per image when batched)."""
    a = np.asarray(anomaly_map)
    if a.size == 0:
        raise DomainError("anomaly_score of an empty map")
    if a.ndim == 2:
        return float(a.max())
    return a.reshape(a.shape[0], -1).max(axis=1)


def max_map_value(level_shapes: Sequence[Tuple[int, int, int]], level_scaling: str = "spatial") -> float:
    """Upper bound of any anomaly-map entry under per-location normalization.

    Each location's channel-summed residual is at most 2, so the bound is the
    sum of ``2 * scale_k`` over levels; used to quantize maps for export.
    """
    total = 0.0
    for c, h, w in level_shapes:
        total += 2.0 / (h * w) if level_scaling == "spatial" else 2.0 / c
    return total
