"""Pixel-wise abnormality score maps and their normalization.

The abnormality score of a pixel is the L2 distance between the embeddings
of co-located patches from the query slice and its normal-appearing
reconstruction, evaluated on a stride grid with reflective border padding
and bilinearly upsampled back to full resolution.
"""

from dataclasses import dataclass, replace

import numpy as np
import torch
from scipy import ndimage

from .discriminative import embed
from .errors import DegenerateInputError, InvalidArgumentError
from .networks import PatchEmbedder
from .volume import Volume


@dataclass
class ScoreMap:
    scores: np.ndarray  # 2D (slice) or 3D (volume)
    normalization: str = "raw"  # raw | zscored
    stride: int = 1
    index_k: int | None = None

    def validate(self) -> "ScoreMap":
        if self.normalization not in ("raw", "zscored"):
            raise InvalidArgumentError(f"unknown normalization {self.normalization!r}")
        if not np.isfinite(self.scores).all():
            raise InvalidArgumentError("score map contains non-finite values")
        return self


def _grid_positions(extent: int, stride: int) -> np.ndarray:
    return np.arange(0, extent, stride)


def _upsample_linear(grid: np.ndarray, positions_i, positions_j, out_shape) -> np.ndarray:
    """Separable linear interpolation from grid samples at given pixel positions."""

    def interp_axis(values, positions, length, axis):
        target = np.arange(length, dtype=np.float64)
        idx = np.searchsorted(positions, target, side="right") - 1
        idx = np.clip(idx, 0, len(positions) - 2) if len(positions) > 1 else np.zeros(length, dtype=int)
        lo = positions[idx]
        hi = positions[np.minimum(idx + 1, len(positions) - 1)]
        span = np.where(hi > lo, hi - lo, 1.0)
        w = np.clip((target - lo) / span, 0.0, 1.0)
        v_lo = np.take(values, idx, axis=axis)
        v_hi = np.take(values, np.minimum(idx + 1, len(positions) - 1), axis=axis)
        shape = [1] * values.ndim
        shape[axis] = length
        w = w.reshape(shape)
        return v_lo * (1.0 - w) + v_hi * w

    out = interp_axis(grid.astype(np.float64), positions_i, out_shape[0], axis=0)
    return interp_axis(out, positions_j, out_shape[1], axis=1)


def _extract_patches(padded: np.ndarray, centers_i, centers_j, patch: int) -> np.ndarray:
    n_i, n_j = len(centers_i), len(centers_j)
    out = np.empty((n_i * n_j, 1, patch, patch), dtype=np.float32)
    idx = 0
    for ci in centers_i:
        for cj in centers_j:
            out[idx, 0] = padded[ci : ci + patch, cj : cj + patch]
            idx += 1
    return out


def abnormality_map(
    model: PatchEmbedder,
    x,
    x_hat,
    stride: int = 4,
    batch_size: int = 2048,
) -> ScoreMap:
    """Embedding-distance score map between a slice and its reconstruction."""
    if getattr(model, "trained_steps", 0) <= 0:
        raise InvalidArgumentError("refusing to score with an untrained embedding network")
    if stride < 1:
        raise InvalidArgumentError("stride must be >= 1")
    x = np.asarray(getattr(x, "data", x), dtype=np.float32)
    x_hat = np.asarray(getattr(x_hat, "data", x_hat), dtype=np.float32)
    if x.shape != x_hat.shape or x.ndim != 2:
        raise InvalidArgumentError(f"slice shapes must match: {x.shape} vs {x_hat.shape}")
    patch = model.patch_size
    half = patch // 2
    pad_x = np.pad(x, half, mode="reflect")
    pad_hat = np.pad(x_hat, half, mode="reflect")

    pos_i = _grid_positions(x.shape[0], stride)
    pos_j = _grid_positions(x.shape[1], stride)
    patches_x = _extract_patches(pad_x, pos_i, pos_j, patch)
    patches_hat = _extract_patches(pad_hat, pos_i, pos_j, patch)

    dists = np.empty(patches_x.shape[0], dtype=np.float64)
    for start in range(0, patches_x.shape[0], batch_size):
        stop = start + batch_size
        fx = embed(model, patches_x[start:stop])
        fh = embed(model, patches_hat[start:stop])
        dists[start:stop] = torch.linalg.vector_norm(fx - fh, dim=1).cpu().numpy()
    grid = dists.reshape(len(pos_i), len(pos_j))
    scores = grid if stride == 1 else _upsample_linear(grid, pos_i, pos_j, x.shape)
    return ScoreMap(scores=scores.astype(np.float32), normalization="raw", stride=stride).validate()


def l1_residual_map(x, x_hat) -> ScoreMap:
    """Per-pixel |x - x_hat| baseline map."""
    x = np.asarray(getattr(x, "data", x), dtype=np.float32)
    x_hat = np.asarray(getattr(x_hat, "data", x_hat), dtype=np.float32)
    if x.shape != x_hat.shape:
        raise InvalidArgumentError(f"slice shapes must match: {x.shape} vs {x_hat.shape}")
    return ScoreMap(scores=np.abs(x - x_hat), normalization="raw", stride=1)


def zscore_normalize(m: ScoreMap, region: np.ndarray | None = None) -> ScoreMap:
    """Standardize scores over ``region`` (or the whole map).

    Pixels outside the region are set to the minimum normalized value so
    they can never rank above any in-region pixel.
    """
    m.validate()
    scores = m.scores.astype(np.float64)
    if region is None:
        region = np.ones(scores.shape, dtype=bool)
    region = region.astype(bool)
    if region.shape != scores.shape:
        raise InvalidArgumentError(f"region shape {region.shape} != scores shape {scores.shape}")
    vals = scores[region]
    if vals.size < 2:
        raise DegenerateInputError("z-score region must contain at least 2 pixels")
    mean, std = float(vals.mean()), float(vals.std())
    if std == 0.0:
        raise DegenerateInputError("z-score region has zero variance")
    normed = (scores - mean) / std
    out = np.full(scores.shape, float(normed[region].min()), dtype=np.float64)
    out[region] = normed[region]
    return replace(m, scores=out.astype(np.float32), normalization="zscored")


def body_mask(volume: Volume) -> np.ndarray:
    """Foreground mask: p5 threshold of nonzero voxels, largest component, hole fill."""
    volume.validate()
    data = volume.data
    nonzero = data[data > 0]
    if nonzero.size == 0:
        raise DegenerateInputError(f"volume {volume.id!r} has no nonzero voxels")
    thr = float(np.percentile(nonzero, 5.0))
    rough = data > thr
    labeled, n = ndimage.label(rough)
    if n == 0:
        raise DegenerateInputError(f"volume {volume.id!r} produced an empty body mask")
    sizes = ndimage.sum_labels(np.ones_like(labeled), labeled, index=np.arange(1, n + 1))
    largest = 1 + int(np.argmax(sizes))
    mask = ndimage.binary_fill_holes(labeled == largest)
    if not mask.any():
        raise DegenerateInputError(f"volume {volume.id!r} produced an empty body mask")
    return mask


def volume_assemble(slices: list[ScoreMap]) -> ScoreMap:
    """Stack per-slice maps back into a 3D map in k-order."""
    if not slices:
        raise InvalidArgumentError("no slice maps to assemble")
    indexed = sorted(slices, key=lambda m: m.index_k if m.index_k is not None else -1)
    indices = [m.index_k for m in indexed]
    if any(i is None for i in indices) or indices != list(range(len(indexed))):
        raise InvalidArgumentError(f"slice maps do not form a complete 0..K-1 set: {indices}")
    norms = {m.normalization for m in indexed}
    strides = {m.stride for m in indexed}
    if len(norms) > 1 or len(strides) > 1:
        raise InvalidArgumentError("slice maps have inconsistent normalization or stride")
    return ScoreMap(
        scores=np.stack([m.scores for m in indexed]),
        normalization=norms.pop(),
        stride=strides.pop(),
    )
