"""Procedural head phantoms with known anatomy and injected abnormalities.

Each phantom is a nested-ellipsoid pseudo-head: a bright skull shell around
textured brain tissue with a darker central ventricle, plus two eye spheres.
Abnormalities are injected with exact ground-truth masks:

* ``metastatic_tumor_analog``   bright sphere inside the brain
* ``extracranial_tumor_analog`` tissue blob sticking out of the skull
* ``cavity_analog``             dark sphere inside the brain
* ``structural_change_analog``  local smooth deformation of the parenchyma

Generation is a pure function of :class:`PhantomConfig`.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import InvalidArgumentError
from .seeding import fold_seed
from .volume import LabelVolume, Volume

ANATOMY_CLASSES = (
    "skull_analog",
    "brain_analog",
    "ventricle_analog",
    "eye_left_analog",
    "eye_right_analog",
)
ABNORMALITY_CLASSES = (
    "metastatic_tumor_analog",
    "extracranial_tumor_analog",
    "cavity_analog",
    "structural_change_analog",
)

SKULL_LEVEL = 0.90
BRAIN_LEVEL = 0.55
VENTRICLE_LEVEL = 0.25
EYE_LEVEL = 0.75


@dataclass
class AnomalySpec:
    count_range: tuple[int, int]
    radius_range: tuple[float, float]
    offset_range: tuple[float, float] = (0.0, 0.0)

    def validate(self, name: str) -> "AnomalySpec":
        for label, rng in (
            ("count", self.count_range),
            ("radius", self.radius_range),
            ("offset", self.offset_range),
        ):
            if rng[0] > rng[1]:
                raise InvalidArgumentError(f"{name}: empty {label} range {rng}")
        if self.count_range[0] < 0:
            raise InvalidArgumentError(f"{name}: negative anomaly count")
        if self.radius_range[0] <= 0:
            raise InvalidArgumentError(f"{name}: non-positive anomaly radius")
        return self


@dataclass
class PhantomConfig:
    shape: tuple[int, int, int] = (24, 64, 64)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    # head semi-axes as fractions of the half-extent per axis, jittered per
    # volume; ranges kept narrow so the body/background ratio stays stable
    # across volumes (histogram matching relies on it)
    head_axes_frac: tuple[tuple[float, float], ...] = (
        (0.81, 0.85),
        (0.77, 0.81),
        (0.67, 0.71),
    )
    ring_thickness: float = 2.0
    ventricle_frac: tuple[float, float] = (0.20, 0.26)
    eye_radius_frac: tuple[float, float] = (0.055, 0.075)
    texture_sigma: float = 1.2
    texture_amp: float = 0.08
    intensity_scale_range: tuple[float, float] = (1.0, 1.0)
    anomalies: dict[str, AnomalySpec] = field(default_factory=dict)
    deformation_amplitude: float = 2.5
    seed: int = 0

    def validate(self) -> "PhantomConfig":
        if any(s < 8 for s in self.shape):
            raise InvalidArgumentError(f"phantom shape too small: {self.shape}")
        if any(s <= 0 for s in self.spacing):
            raise InvalidArgumentError(f"spacing must be positive: {self.spacing}")
        for lo, hi in self.head_axes_frac:
            if not (0 < lo <= hi < 1):
                raise InvalidArgumentError(f"bad head axis range ({lo}, {hi})")
        if self.intensity_scale_range[0] > self.intensity_scale_range[1]:
            raise InvalidArgumentError("empty intensity scale range")
        for name, spec in self.anomalies.items():
            if name not in ABNORMALITY_CLASSES:
                raise InvalidArgumentError(f"unknown abnormality class {name!r}")
            spec.validate(name)
        return self


def _ellipsoid(shape, center, axes) -> np.ndarray:
    grids = np.ogrid[tuple(slice(0, s) for s in shape)]
    acc = 0.0
    for g, c, a in zip(grids, center, axes):
        acc = acc + ((g - c) / max(a, 1e-9)) ** 2
    return acc <= 1.0


def _sphere(shape, center, radius) -> np.ndarray:
    return _ellipsoid(shape, center, (radius, radius, radius))


def _brain_geometry(cfg: PhantomConfig, rng: np.random.Generator):
    shape = np.asarray(cfg.shape, dtype=np.float64)
    half = (shape - 1) / 2.0
    center = half + rng.uniform(-1.5, 1.5, size=3)
    fracs = np.array([rng.uniform(lo, hi) for lo, hi in cfg.head_axes_frac])
    head_axes = fracs * half
    brain_axes = head_axes - cfg.ring_thickness
    if np.any(brain_axes < 2):
        raise InvalidArgumentError("head too small for the configured ring thickness")
    return center, head_axes, brain_axes


def _sample_center_inside(rng, center, axes, radius, shape):
    """Uniform center such that a sphere of ``radius`` fits inside the ellipsoid."""
    room = np.asarray(axes) - radius
    if np.any(room <= 1.0):
        raise InvalidArgumentError(
            f"anomaly radius {radius:.1f} does not fit inside the brain region (axes {axes})"
        )
    for _ in range(1000):
        u = rng.uniform(-1.0, 1.0, size=3)
        if (u**2).sum() <= 1.0:
            cand = center + u * room
            if np.all(cand >= 0) and np.all(cand <= np.asarray(shape) - 1):
                return cand
    raise InvalidArgumentError("failed to place anomaly inside the brain region")


def _deform_region(data: np.ndarray, mask: np.ndarray, center, radius, amplitude, rng):
    """Warp intensities inside ``mask`` with a Gaussian displacement bump."""
    ks, is_, js = np.nonzero(mask)
    lo = np.maximum([ks.min(), is_.min(), js.min()], 0)
    hi = np.minimum([ks.max() + 1, is_.max() + 1, js.max() + 1], data.shape)
    grids = np.meshgrid(*[np.arange(l, h, dtype=np.float64) for l, h in zip(lo, hi)], indexing="ij")
    r2 = sum((g - c) ** 2 for g, c in zip(grids, center))
    bump = amplitude * np.exp(-r2 / (2.0 * (radius / 2.0) ** 2))
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    coords = [g + bump * d for g, d in zip(grids, direction)]
    warped = ndimage.map_coordinates(data, coords, order=1, mode="nearest")
    sub = tuple(slice(l, h) for l, h in zip(lo, hi))
    region = mask[sub]
    data[sub][region] = warped[region]


def generate_phantom(cfg: PhantomConfig) -> tuple[Volume, LabelVolume]:
    """Generate one phantom volume and its anatomy + abnormality masks."""
    cfg.validate()
    rng = np.random.default_rng(fold_seed(cfg.seed, "phantom"))
    shape = cfg.shape
    center, head_axes, brain_axes = _brain_geometry(cfg, rng)

    head = _ellipsoid(shape, center, head_axes)
    brain_full = _ellipsoid(shape, center, brain_axes)
    skull = head & ~brain_full

    vshape = np.array([rng.uniform(*cfg.ventricle_frac) for _ in range(3)]) * brain_axes
    vcenter = center + rng.uniform(-1.0, 1.0, size=3)
    ventricle = _ellipsoid(shape, vcenter, vshape) & brain_full
    brain = brain_full & ~ventricle

    eye_r = rng.uniform(*cfg.eye_radius_frac) * min(shape[1], shape[2])
    eyes = []
    for side in (-1.0, 1.0):
        ecenter = center + np.array([0.0, -(head_axes[1] + eye_r * 0.6), side * head_axes[2] * 0.42])
        ecenter = np.clip(ecenter, eye_r + 0.5, np.asarray(shape) - 1 - eye_r - 0.5)
        eyes.append(_sphere(shape, ecenter, eye_r) & ~head)
    eye_left, eye_right = eyes

    data = np.zeros(shape, dtype=np.float64)
    data[skull] = SKULL_LEVEL
    data[brain] = BRAIN_LEVEL
    data[ventricle] = VENTRICLE_LEVEL
    data[eye_left] = EYE_LEVEL
    data[eye_right] = EYE_LEVEL

    # texture everywhere there is tissue: constant-intensity regions would
    # form per-volume histogram atoms that no intensity template can match
    body = head | eye_left | eye_right
    texture = ndimage.gaussian_filter(rng.normal(size=shape), cfg.texture_sigma)
    texture *= cfg.texture_amp / max(texture.std(), 1e-9)
    data[body] += texture[body]

    scale = rng.uniform(*cfg.intensity_scale_range)
    data *= scale

    masks = {
        "skull_analog": skull,
        "brain_analog": brain,
        "ventricle_analog": ventricle,
        "eye_left_analog": eye_left,
        "eye_right_analog": eye_right,
    }
    for name in ABNORMALITY_CLASSES:
        masks[name] = np.zeros(shape, dtype=bool)

    # abnormalities go in last so intensity offsets are absolute
    for name in ABNORMALITY_CLASSES:
        spec = cfg.anomalies.get(name)
        if spec is None:
            continue
        count = int(rng.integers(spec.count_range[0], spec.count_range[1] + 1))
        for _ in range(count):
            radius = rng.uniform(*spec.radius_range)
            offset = rng.uniform(*spec.offset_range)
            if name in ("metastatic_tumor_analog", "cavity_analog"):
                c = _sample_center_inside(rng, center, brain_axes, radius, shape)
                lesion = _sphere(shape, c, radius) & brain_full
                data[lesion] += offset
            elif name == "extracranial_tumor_analog":
                u = rng.normal(size=3)
                u /= np.linalg.norm(u)
                c = center + u * head_axes * 1.02
                c = np.clip(c, 1.0, np.asarray(shape) - 2.0)
                lesion = _sphere(shape, c, radius) & ~brain_full
                if not lesion.any():
                    continue
                base = BRAIN_LEVEL * scale
                data[lesion] = np.maximum(data[lesion], base) + offset
            else:  # structural_change_analog
                c = _sample_center_inside(rng, center, brain_axes, radius, shape)
                lesion = _sphere(shape, c, radius) & brain_full
                _deform_region(data, lesion, c, radius, cfg.deformation_amplitude, rng)
            masks[name] |= lesion

    volume = Volume(data=data.astype(np.float32), spacing=tuple(cfg.spacing), id="")
    labels = LabelVolume(masks={k: v.astype(np.uint8) for k, v in masks.items()})
    return volume, labels


def true_body_mask(labels: LabelVolume) -> np.ndarray:
    """Generator ground truth for the body: all anatomy plus added tissue."""
    return labels.any_of(ANATOMY_CLASSES + ("extracranial_tumor_analog",))
