"""Experiment configuration: profiles, file loading, schema validation, hashing.

Two built-in profiles exist. ``paper`` carries the full-scale hyperparameters
(256x256 slices, encoder 32-64-128-256-512-512 with a 128x4x4 latent,
alpha=0.5 / beta=0.04 / m=120, batch size 120, 200 epochs, latent search
100 steps at lr 1e-3).  ``desk`` is a reduced profile sized so the whole
pipeline runs on a laptop-class CPU while preserving every structural
property of the method.

Config files are JSON (or TOML when a parser is available); their contents
are deep-merged over the selected profile and validated against the
published JSON schema before anything runs.
"""

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field
from importlib import resources

import jsonschema

from .errors import ConfigError
from .phantom import ABNORMALITY_CLASSES


@dataclass
class AnomalyPlan:
    volumes: int  # number of abnormal test volumes carrying this class
    count_range: tuple[int, int]
    radius_range: tuple[float, float]
    offset_range: tuple[float, float] = (0.0, 0.0)


@dataclass
class DatasetConfig:
    n_train: int = 24
    n_test_normal: int = 4
    n_test_abnormal: int = 8
    shape: tuple[int, int, int] = (24, 64, 64)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    intensity_scale_range: tuple[float, float] = (0.9, 1.15)
    texture_sigma: float = 1.2
    texture_amp: float = 0.08
    ring_thickness: float = 2.0
    deformation_amplitude: float = 2.0
    anomalies: dict[str, AnomalyPlan] = field(default_factory=dict)


@dataclass
class PreprocessConfig:
    target_spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    slice_size: int = 64
    scale_range: tuple[float, float] = (0.9, 1.1)
    rotation_deg: float = 10.0
    flip_prob: float = 0.5


@dataclass
class ReconStageConfig:
    ae_weight: float = 1.0
    reg_weight: float = 1.0
    alpha: float = 0.5
    beta: float = 0.04
    margin: float = 120.0
    ssim_weight: float = 1.0
    lr_encoder: float = 1e-4
    lr_decoder: float = 5e-3
    batch_size: int = 120
    epochs: int = 200


@dataclass
class ReconConfig:
    encoder_filters: tuple = (32, 64, 128, 256, 512, 512)
    decoder_filters: tuple = (512, 512, 256, 128, 64, 32, 16)
    latent_channels: int = 128
    vae: ReconStageConfig = field(default_factory=ReconStageConfig)
    introvae: ReconStageConfig = field(default_factory=ReconStageConfig)


@dataclass
class DiscConfig:
    patch_size: int = 32
    embed_dim: int = 256
    filters: tuple = (64, 128, 256, 512)
    hidden: int = 1024
    max_shift: int = 3
    scale_jitter: float = 0.05
    intensity_scale: float = 0.05
    intensity_offset: float = 0.05
    min_neg_dist: int = 8
    body_threshold: float = -0.95
    lr: float = 1e-4
    batch_size: int = 32
    steps: int = 2000


@dataclass
class SegConfig:
    filters: tuple = (16, 32, 64)
    lr: float = 1e-5
    weight_decay: float = 1e-5
    batch_size: int = 100
    steps: int = 2000
    focal_gamma: float = 2.0
    dice_eps: float = 1e-5
    rotation_deg: float = 10.0
    split: tuple[float, float, float] = (0.7, 0.15, 0.15)


@dataclass
class ScoringConfig:
    stride: int = 4
    latent_search_steps: int = 100
    latent_search_lr: float = 1e-3
    slice_batch: int = 32
    patch_batch: int = 2048


@dataclass
class EvalConfig:
    n_thresholds: int = 1000


@dataclass
class ExperimentConfig:
    seed: int = 0
    profile: str = "paper"
    output_dir: str = "runs/out"
    cache_dir: str | None = None
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    recon: ReconConfig = field(default_factory=ReconConfig)
    disc: DiscConfig = field(default_factory=DiscConfig)
    seg: SegConfig = field(default_factory=SegConfig)
    scoring: ScoringConfig = field(default_factory=ScoringConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def semantic_hash(self) -> str:
        """Config hash over everything that affects results (not output paths)."""
        payload = self.to_dict()
        payload.pop("output_dir", None)
        payload.pop("cache_dir", None)
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


_DESK_ANOMALIES = {
    "metastatic_tumor_analog": {
        "volumes": 8,
        "count_range": [1, 2],
        "radius_range": [2.5, 4.5],
        "offset_range": [0.35, 0.55],
    },
    "cavity_analog": {
        "volumes": 5,
        "count_range": [1, 1],
        "radius_range": [4.0, 6.5],
        "offset_range": [-0.45, -0.3],
    },
    "extracranial_tumor_analog": {
        "volumes": 2,
        "count_range": [1, 1],
        "radius_range": [2.5, 4.0],
        "offset_range": [0.15, 0.3],
    },
    "structural_change_analog": {
        "volumes": 2,
        "count_range": [1, 1],
        "radius_range": [3.0, 5.0],
        "offset_range": [0.0, 0.0],
    },
}

_PAPER_ANOMALIES = {
    "metastatic_tumor_analog": {
        "volumes": 40,
        "count_range": [1, 4],
        "radius_range": [4.0, 14.0],
        "offset_range": [0.35, 0.55],
    },
    "cavity_analog": {
        "volumes": 20,
        "count_range": [1, 1],
        "radius_range": [10.0, 24.0],
        "offset_range": [-0.45, -0.3],
    },
    "extracranial_tumor_analog": {
        "volumes": 10,
        "count_range": [1, 2],
        "radius_range": [6.0, 12.0],
        "offset_range": [0.15, 0.3],
    },
    "structural_change_analog": {
        "volumes": 5,
        "count_range": [1, 1],
        "radius_range": [8.0, 16.0],
        "offset_range": [0.0, 0.0],
    },
}

PROFILES: dict[str, dict] = {
    # full-scale setup; hyperparameters follow the published experiment
    "paper": {
        "profile": "paper",
        "dataset": {
            "n_train": 200,
            "n_test_normal": 35,
            "n_test_abnormal": 40,
            "shape": [180, 288, 288],
            "spacing": [1.0, 1.0, 1.0],
            "anomalies": _PAPER_ANOMALIES,
        },
        "preprocess": {"slice_size": 256},
        "recon": {
            "encoder_filters": [32, 64, 128, 256, 512, 512],
            "decoder_filters": [512, 512, 256, 128, 64, 32, 16],
            "latent_channels": 128,
            "vae": {
                "ae_weight": 1.0,
                "reg_weight": 1.0,
                "ssim_weight": 0.0,
                "lr_encoder": 1e-4,
                "lr_decoder": 5e-3,
                "batch_size": 120,
                "epochs": 200,
            },
            "introvae": {
                "alpha": 0.5,
                "beta": 0.04,
                "margin": 120.0,
                "ssim_weight": 1.0,
                "lr_encoder": 1e-4,
                "lr_decoder": 5e-3,
                "batch_size": 120,
                "epochs": 200,
            },
        },
        "disc": {
            "patch_size": 32,
            "embed_dim": 256,
            "filters": [64, 128, 256, 512],
            "hidden": 1024,
            "min_neg_dist": 8,
            "lr": 1e-4,
            "batch_size": 120,
            "steps": 20000,
        },
        "seg": {
            "filters": [16, 32, 64, 128],
            "lr": 1e-5,
            "weight_decay": 1e-5,
            "batch_size": 100,
            "steps": 20000,
        },
        "scoring": {"stride": 4, "latent_search_steps": 100, "latent_search_lr": 1e-3},
        "evaluation": {"n_thresholds": 1000},
    },
    # reduced profile: 64x64 slices, filter plans /4, small phantom set
    "desk": {
        "profile": "desk",
        "dataset": {
            "n_train": 24,
            "n_test_normal": 4,
            "n_test_abnormal": 8,
            "shape": [24, 64, 64],
            "spacing": [1.0, 1.0, 1.0],
            "anomalies": _DESK_ANOMALIES,
        },
        "preprocess": {"slice_size": 64},
        "recon": {
            "encoder_filters": [8, 16, 32, 64],
            "decoder_filters": [64, 32, 16, 8, 4],
            "latent_channels": 32,
            "vae": {
                "ae_weight": 512.0,
                "reg_weight": 1.0,
                "ssim_weight": 0.0,
                "lr_encoder": 5e-4,
                "lr_decoder": 5e-4,
                "batch_size": 32,
                "epochs": 25,
            },
            "introvae": {
                "alpha": 0.25,
                "beta": 2048.0,
                "margin": 40.0,
                "ssim_weight": 1.0,
                "lr_encoder": 5e-4,
                "lr_decoder": 5e-4,
                "batch_size": 32,
                "epochs": 35,
            },
        },
        "disc": {
            "patch_size": 16,
            "embed_dim": 64,
            "filters": [16, 32, 64, 128],
            "hidden": 256,
            "min_neg_dist": 4,
            "lr": 2e-4,
            "batch_size": 32,
            "steps": 2000,
        },
        "seg": {
            "filters": [8, 16, 32],
            "lr": 1e-3,
            "weight_decay": 1e-5,
            "batch_size": 16,
            "steps": 600,
        },
        "scoring": {"stride": 2, "latent_search_steps": 100, "latent_search_lr": 1e-3},
        "evaluation": {"n_thresholds": 1000},
    },
}


def load_schema() -> dict:
    with resources.files("anomaly_recon.schemas").joinpath("experiment_config.schema.json").open() as fh:
        return json.load(fh)


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _tuple(seq, n=None, cast=float):
    values = tuple(cast(v) for v in seq)
    if n is not None and len(values) != n:
        raise ConfigError(f"expected {n} values, got {values}")
    return values


def config_from_dict(payload: dict) -> ExperimentConfig:
    """Build a validated ExperimentConfig from a merged plain dict."""
    try:
        jsonschema.validate(payload, load_schema())
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"config failed schema validation: {exc.message} (at {list(exc.path)})") from None

    ds = payload.get("dataset", {})
    anomalies = {
        name: AnomalyPlan(
            volumes=int(spec["volumes"]),
            count_range=_tuple(spec["count_range"], 2, int),
            radius_range=_tuple(spec["radius_range"], 2),
            offset_range=_tuple(spec.get("offset_range", [0.0, 0.0]), 2),
        )
        for name, spec in ds.get("anomalies", {}).items()
    }
    unknown = set(anomalies) - set(ABNORMALITY_CLASSES)
    if unknown:
        raise ConfigError(f"unknown abnormality classes in config: {sorted(unknown)}")

    def build(cls, section: dict, **extra):
        fields = {f: section[f] for f in section}
        fields.update(extra)
        return cls(**fields)

    try:
        cfg = ExperimentConfig(
            seed=int(payload.get("seed", 0)),
            profile=payload.get("profile", "paper"),
            output_dir=payload.get("output_dir", "runs/out"),
            cache_dir=payload.get("cache_dir"),
            dataset=build(
                DatasetConfig,
                {k: v for k, v in ds.items() if k != "anomalies"},
                anomalies=anomalies,
            ),
            preprocess=build(PreprocessConfig, payload.get("preprocess", {})),
            recon=ReconConfig(
                encoder_filters=_tuple(payload["recon"]["encoder_filters"], cast=int),
                decoder_filters=_tuple(payload["recon"]["decoder_filters"], cast=int),
                latent_channels=int(payload["recon"]["latent_channels"]),
                vae=build(ReconStageConfig, payload["recon"].get("vae", {})),
                introvae=build(ReconStageConfig, payload["recon"].get("introvae", {})),
            )
            if "recon" in payload
            else ReconConfig(),
            disc=build(DiscConfig, payload.get("disc", {})),
            seg=build(SegConfig, payload.get("seg", {})),
            scoring=build(ScoringConfig, payload.get("scoring", {})),
            evaluation=build(EvalConfig, payload.get("evaluation", {})),
        )
    except (TypeError, KeyError, ValueError) as exc:
        raise ConfigError(f"bad config value: {exc}") from None

    # normalize list-typed fields coming from JSON
    cfg.dataset.shape = _tuple(cfg.dataset.shape, 3, int)
    cfg.dataset.spacing = _tuple(cfg.dataset.spacing, 3)
    cfg.dataset.intensity_scale_range = _tuple(cfg.dataset.intensity_scale_range, 2)
    cfg.preprocess.target_spacing = _tuple(cfg.preprocess.target_spacing, 3)
    cfg.preprocess.scale_range = _tuple(cfg.preprocess.scale_range, 2)
    cfg.disc.filters = _tuple(cfg.disc.filters, cast=int)
    cfg.seg.filters = _tuple(cfg.seg.filters, cast=int)
    cfg.seg.split = _tuple(cfg.seg.split, 3)
    return cfg


def profile_config(
    profile: str = "paper",
    seed: int = 0,
    output_dir: str | None = None,
    overrides: dict | None = None,
) -> ExperimentConfig:
    """Config for a built-in profile with optional file/CLI overrides."""
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    payload = copy.deepcopy(PROFILES[profile])
    payload["seed"] = seed
    payload["output_dir"] = output_dir or f"runs/{profile}"
    if overrides:
        payload = _deep_merge(payload, overrides)
    return config_from_dict(payload)


def load_config_file(path: str) -> dict:
    """Read a JSON or TOML config file into a plain dict."""
    if path.endswith(".toml"):
        try:
            import tomllib as toml  # py311+
        except ImportError:
            try:
                import tomli as toml
            except ImportError:
                raise ConfigError("TOML config support needs Python 3.11+ or the 'tomli' package") from None
        with open(path, "rb") as fh:
            return toml.load(fh)
    with open(path) as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None


def resolve_config(
    config_path: str | None,
    profile: str | None,
    seed: int | None,
    output_dir: str | None = None,
) -> ExperimentConfig:
    """CLI entry: file overrides merge over the profile; flags win over the file."""
    overrides = load_config_file(config_path) if config_path else {}
    chosen_profile = profile or overrides.get("profile", "paper")
    chosen_seed = seed if seed is not None else int(overrides.get("seed", 0))
    chosen_out = output_dir or overrides.get("output_dir")
    overrides = {k: v for k, v in overrides.items() if k not in ("profile", "seed", "output_dir")}
    return profile_config(chosen_profile, seed=chosen_seed, output_dir=chosen_out, overrides=overrides)
