"""3D volumes, 2D slices, label masks, and their on-disk format.

Volumes are stored as ``<id>.raw`` (little-endian float32, C-order z,y,x)
next to ``<id>.json`` describing shape, voxel spacing and dtype.  Label
volumes store one raw/json pair per class with an ``_<class>`` suffix.
Score maps reuse the same container with extra metadata fields.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError, MissingArtifactError

RAW_DTYPE = "f32le"


@dataclass
class Volume:
    """A 3D scalar image. ``data`` is (K, I, J) = (slices, height, width)."""

    data: np.ndarray
    spacing: tuple[float, float, float]  # (dz, dy, dx) in mm
    id: str = ""

    def validate(self) -> "Volume":
        if self.data.ndim != 3:
            raise InvalidArgumentError(f"volume data must be 3D, got shape {self.data.shape}")
        if any(s <= 0 for s in self.spacing):
            raise InvalidArgumentError(f"voxel spacing must be positive, got {self.spacing}")
        if not np.isfinite(self.data).all():
            raise InvalidArgumentError(f"volume {self.id!r} contains non-finite voxels")
        return self

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)


@dataclass
class Slice:
    """A single axial slice in [-1, 1]."""

    data: np.ndarray
    source_id: str = ""
    index_k: int = 0

    def validate(self) -> "Slice":
        if self.data.ndim != 2:
            raise InvalidArgumentError(f"slice data must be 2D, got shape {self.data.shape}")
        lo, hi = float(self.data.min()), float(self.data.max())
        if lo < -1.0 - 1e-6 or hi > 1.0 + 1e-6:
            raise InvalidArgumentError(f"slice intensities outside [-1, 1]: [{lo}, {hi}]")
        return self


@dataclass
class LabelVolume:
    """Binary masks per class, each aligned with a companion Volume."""

    masks: dict[str, np.ndarray] = field(default_factory=dict)

    def validate(self, volume_shape: tuple[int, int, int] | None = None) -> "LabelVolume":
        for name, mask in self.masks.items():
            if volume_shape is not None and tuple(mask.shape) != tuple(volume_shape):
                raise InvalidArgumentError(
                    f"mask {name!r} shape {mask.shape} does not match volume shape {volume_shape}"
                )
            vals = np.unique(mask)
            if not np.isin(vals, (0, 1)).all():
                raise InvalidArgumentError(f"mask {name!r} is not binary (values {vals[:5]})")
        return self

    def any_of(self, classes) -> np.ndarray:
        """Union of the named class masks (missing classes contribute nothing)."""
        out = None
        for name in classes:
            mask = self.masks.get(name)
            if mask is None:
                continue
            out = mask.astype(bool) if out is None else (out | mask.astype(bool))
        if out is None:
            shapes = [m.shape for m in self.masks.values()]
            if not shapes:
                raise InvalidArgumentError("label volume has no masks")
            out = np.zeros(shapes[0], dtype=bool)
        return out


def write_volume(directory, volume: Volume, extra_meta: dict | None = None) -> str:
    """Write raw+json pair; returns the path of the .raw file."""
    volume.validate()
    os.makedirs(directory, exist_ok=True)
    raw_path = os.path.join(directory, f"{volume.id}.raw")
    meta = {
        "shape": [int(s) for s in volume.data.shape],
        "spacing": [float(s) for s in volume.spacing],
        "dtype": RAW_DTYPE,
    }
    if extra_meta:
        meta.update(extra_meta)
    volume.data.astype("<f4").tofile(raw_path)
    with open(os.path.join(directory, f"{volume.id}.json"), "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
    return raw_path


def read_volume(directory, volume_id: str) -> tuple[Volume, dict]:
    """Read a raw+json pair; returns (volume, full metadata dict)."""
    json_path = os.path.join(directory, f"{volume_id}.json")
    raw_path = os.path.join(directory, f"{volume_id}.raw")
    if not os.path.exists(json_path) or not os.path.exists(raw_path):
        raise MissingArtifactError(f"volume {volume_id!r} not found in {directory}")
    with open(json_path) as fh:
        meta = json.load(fh)
    if meta.get("dtype") != RAW_DTYPE:
        raise InvalidArgumentError(f"unsupported dtype {meta.get('dtype')!r} for {volume_id!r}")
    shape = tuple(int(s) for s in meta["shape"])
    data = np.fromfile(raw_path, dtype="<f4")
    if data.size != int(np.prod(shape)):
        raise InvalidArgumentError(
            f"raw payload for {volume_id!r} has {data.size} values, expected {np.prod(shape)}"
        )
    vol = Volume(data=data.reshape(shape).astype(np.float32), spacing=tuple(meta["spacing"]), id=volume_id)
    return vol, meta


def write_labels(directory, volume_id: str, labels: LabelVolume, spacing) -> list[str]:
    paths = []
    for name, mask in labels.masks.items():
        vol = Volume(data=mask.astype(np.float32), spacing=tuple(spacing), id=f"{volume_id}_{name}")
        paths.append(write_volume(directory, vol, extra_meta={"class": name}))
    return paths


def read_labels(directory, volume_id: str, classes) -> LabelVolume:
    masks = {}
    for name in classes:
        vol, _ = read_volume(directory, f"{volume_id}_{name}")
        masks[name] = vol.data.astype(np.uint8)
    return LabelVolume(masks=masks)


def center_crop_pad(arr: np.ndarray, size: tuple[int, int], pad_value: float = 0.0) -> np.ndarray:
    """Center-crop or zero-pad the trailing two axes to ``size``.

    Odd overhang follows numpy convention: the extra row/column is taken
    from (or added to) the trailing side.
    """
    out_h, out_w = size
    h, w = arr.shape[-2], arr.shape[-1]
    top = max((h - out_h) // 2, 0)
    left = max((w - out_w) // 2, 0)
    cropped = arr[..., top : top + out_h, left : left + out_w]
    pad_h = out_h - cropped.shape[-2]
    pad_w = out_w - cropped.shape[-1]
    if pad_h == 0 and pad_w == 0:
        return cropped
    before_h, before_w = pad_h // 2, pad_w // 2
    pad = [(0, 0)] * (arr.ndim - 2) + [
        (before_h, pad_h - before_h),
        (before_w, pad_w - before_w),
    ]
    return np.pad(cropped, pad, mode="constant", constant_values=pad_value)
