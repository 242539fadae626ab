"""Volume preprocessing: resampling, intensity normalization, slicing, augmentation.

The chain applied before any network sees a voxel is::

    resample -> histogram_match -> decompose_and_crop -> renormalize [-> augment]

Augmentation operates on renormalized slices and is only used at training
time; interpolated values are clamped so the [-1, 1] contract survives.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.interpolate import CubicSpline

from .errors import DegenerateInputError, InvalidArgumentError
from .volume import Slice, Volume, center_crop_pad


def resample_volume(volume: Volume, target_spacing: tuple[float, float, float]) -> Volume:
    """Resample to ``target_spacing`` with cubic spline interpolation.

    The output grid preserves physical extent: ``n_out = round(n_in * s_in / s_out)``
    per axis, with voxel centers aligned under the cell-center convention.
    """
    volume.validate()
    if any(s <= 0 for s in target_spacing):
        raise InvalidArgumentError(f"target spacing must be positive, got {target_spacing}")
    if tuple(volume.spacing) == tuple(target_spacing):
        return Volume(data=volume.data.copy(), spacing=tuple(target_spacing), id=volume.id)

    out = volume.data.astype(np.float64)
    for axis in range(3):
        s_in, s_out = volume.spacing[axis], target_spacing[axis]
        n_in = out.shape[axis]
        if s_in == s_out:
            continue
        n_out = max(int(round(n_in * s_in / s_out)), 1)
        # voxel-center mapping: output center o sits at input coordinate
        # (o + 0.5) * s_out / s_in - 0.5
        coords = (np.arange(n_out) + 0.5) * (s_out / s_in) - 0.5
        spline = CubicSpline(np.arange(n_in, dtype=np.float64), out, axis=axis)
        out = spline(coords)
    return Volume(data=out.astype(np.float32), spacing=tuple(target_spacing), id=volume.id)


def resample_labels_nearest(mask: np.ndarray, spacing, target_spacing) -> np.ndarray:
    """Nearest-neighbour companion to ``resample_volume`` for binary masks."""
    if tuple(spacing) == tuple(target_spacing):
        return mask.copy()
    out = mask
    for axis in range(3):
        s_in, s_out = spacing[axis], target_spacing[axis]
        n_in = out.shape[axis]
        if s_in == s_out:
            continue
        n_out = max(int(round(n_in * s_in / s_out)), 1)
        coords = (np.arange(n_out) + 0.5) * (s_out / s_in) - 0.5
        idx = np.clip(np.rint(coords).astype(int), 0, n_in - 1)
        out = np.take(out, idx, axis=axis)
    return out


@dataclass
class HistogramReference:
    """Monotone intensity-quantile template used for histogram matching.

    ``values[i]`` is the reference intensity at quantile ``i / (len(values)-1)``.
    Built from pooled training volumes, rescaled so the tissue peak (the
    dominant mode of above-background intensities) lands on the midpoint of
    the reference range.
    """

    values: np.ndarray

    N_ANCHORS = 2049

    @property
    def quantiles(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, len(self.values))

    @classmethod
    def from_volumes(cls, volumes, peak_bins: int = 128) -> "HistogramReference":
        pooled = np.concatenate([np.asarray(v.data, dtype=np.float64).ravel() for v in volumes])
        if pooled.size == 0 or pooled.max() == pooled.min():
            raise DegenerateInputError("cannot build a histogram reference from constant data")
        qs = np.linspace(0.0, 1.0, cls.N_ANCHORS)
        values = np.quantile(pooled, qs)

        # locate the dominant above-background tissue peak and stretch the
        # template piecewise-linearly so that peak maps to the mid intensity
        body = pooled[pooled > pooled.min()]
        hist, edges = np.histogram(body, bins=peak_bins)
        peak = 0.5 * (edges[np.argmax(hist)] + edges[np.argmax(hist) + 1])
        lo, hi = values[0], values[-1]
        mid = 0.5 * (lo + hi)
        peak = min(max(peak, lo + 1e-9 * (hi - lo)), hi - 1e-9 * (hi - lo))
        rescaled = np.interp(values, [lo, peak, hi], [lo, mid, hi])
        return cls(values=np.maximum.accumulate(rescaled))

    def to_json(self) -> dict:
        return {"values": [float(v) for v in self.values]}

    @classmethod
    def from_json(cls, payload: dict) -> "HistogramReference":
        return cls(values=np.asarray(payload["values"], dtype=np.float64))


def histogram_match(volume: Volume, reference: HistogramReference) -> Volume:
    """Map intensities so the empirical CDF follows the reference template.

    Ties share a mid-rank, so equal input intensities stay equal and rank
    order is preserved exactly.
    """
    volume.validate()
    flat = volume.data.ravel().astype(np.float64)
    if flat.max() == flat.min():
        raise DegenerateInputError(f"volume {volume.id!r} has constant intensity")
    order = np.sort(flat)
    n = flat.size
    # mid-rank empirical CDF position of every voxel, ties collapsed
    lo = np.searchsorted(order, flat, side="left")
    hi = np.searchsorted(order, flat, side="right")
    pos = (lo + hi - 1) / (2.0 * max(n - 1, 1))
    matched = np.interp(pos, reference.quantiles, reference.values)
    return Volume(
        data=matched.reshape(volume.data.shape).astype(np.float32),
        spacing=tuple(volume.spacing),
        id=volume.id,
    )


def decompose_and_crop(volume: Volume, size: int = 256, pad_value: float = 0.0) -> list[np.ndarray]:
    """Split into axial planes, each center-cropped / padded to ``size`` x ``size``.

    Returns raw 2D arrays in k-order; ``renormalize`` turns them into Slices.
    """
    volume.validate()
    return [
        center_crop_pad(volume.data[k], (size, size), pad_value=pad_value)
        for k in range(volume.data.shape[0])
    ]


def renormalize(data: np.ndarray, source_id: str = "", index_k: int = 0) -> Slice:
    """Affinely map [min, max] to [-1, 1]."""
    arr = np.asarray(data, dtype=np.float32)
    if not np.isfinite(arr).all():
        raise InvalidArgumentError("slice contains non-finite values")
    lo, hi = float(arr.min()), float(arr.max())
    if hi == lo:
        raise DegenerateInputError("cannot renormalize a constant slice")
    out = (arr - lo) / (hi - lo) * 2.0 - 1.0
    return Slice(data=out.astype(np.float32), source_id=source_id, index_k=index_k)


@dataclass
class AugmentParams:
    flip: bool
    scale: float
    angle_deg: float


def draw_augment_params(
    rng: np.random.Generator,
    scale_range: tuple[float, float] = (0.9, 1.1),
    rotation_deg: float = 10.0,
    flip_prob: float = 0.5,
) -> AugmentParams:
    return AugmentParams(
        flip=bool(rng.random() < flip_prob),
        scale=float(rng.uniform(*scale_range)),
        angle_deg=float(rng.uniform(-rotation_deg, rotation_deg)),
    )


def augment(s: Slice, rng: np.random.Generator, params: AugmentParams | None = None) -> Slice:
    """Random horizontal flip, isotropic scale, and rotation about the center.

    Bilinear interpolation; out-of-frame pixels are filled with -1
    (background) and the result is clamped back into [-1, 1].
    """
    s.validate()
    if params is None:
        params = draw_augment_params(rng)
    data = s.data
    if params.flip:
        data = data[:, ::-1]
    if params.scale != 1.0 or params.angle_deg != 0.0:
        theta = np.deg2rad(params.angle_deg)
        rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
        # affine_transform maps output coords through the matrix: invert scale
        mat = rot.T / params.scale
        center = (np.asarray(data.shape) - 1) / 2.0
        offset = center - mat @ center
        data = ndimage.affine_transform(
            data, mat, offset=offset, order=1, mode="constant", cval=-1.0
        )
        data = np.clip(data, -1.0, 1.0)
    return Slice(data=np.ascontiguousarray(data, dtype=np.float32), source_id=s.source_id, index_k=s.index_k)
