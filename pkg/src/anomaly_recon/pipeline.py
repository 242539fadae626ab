"""Experiment stages: dataset generation, training, scoring, evaluation.

Every stage is individually re-runnable and guarded by a content signature
(config sections + input artifact hashes); a rerun with unchanged inputs is
a no-op.  All randomness is derived from the experiment seed with
structural tags, so identical configs give identical artifacts.

Run-directory layout::

    dataset/          volumes, labels, histogram reference, dataset manifest
    checkpoints/      <stage>.ckpt + loss_<stage>.csv
    scores/<variant>/ z-scored score volumes, raw score/L1/recon volumes
    report/           report.json, report.csv, figures/, per-slice CSVs
    manifest.jsonl    append-only stage log
"""

import csv
import json
import os
import time
from dataclasses import dataclass

import numpy as np
import torch

from . import plots
from .config import ExperimentConfig
from .discriminative import TripletConfig, sample_triplet, train_discriminator_step, triplet_batch_tensors
from .errors import DegenerateInputError, InvalidArgumentError, MissingArtifactError
from .checkpoint import load_checkpoint, save_checkpoint
from .fidelity import SEG_CLASS_NAMES, SegModel, anatomy_index_map, dice_binary, labels_to_onehot, train_segmentation_step
from .losses import loss_ae
from .manifest import RunManifest, content_hash, signature_of
from .networks import PatchEmbedder
from .phantom import (
    ABNORMALITY_CLASSES,
    ANATOMY_CLASSES,
    AnomalySpec,
    PhantomConfig,
    generate_phantom,
    true_body_mask,
)
from .preprocess import (
    HistogramReference,
    augment,
    decompose_and_crop,
    histogram_match,
    renormalize,
    resample_labels_nearest,
    resample_volume,
)
from .reconstruction import (
    ReconArch,
    ReconModel,
    decode,
    encode,
    latent_search,
    make_optimizers,
    train_introvae_step,
    train_vae_step,
)
from .scoring import ScoreMap, abnormality_map, body_mask, l1_residual_map, volume_assemble, zscore_normalize
from .seeding import fold_seed, rng_for
from .volume import LabelVolume, Volume, center_crop_pad, read_volume, write_labels, write_volume

VARIANTS = ("vae", "introvae", "introvae_latsearch")
RECON_MODES = ("vae", "introvae")


# ---------------------------------------------------------------------------
# paths and helpers


def cache_root(cfg: ExperimentConfig) -> str:
    return cfg.cache_dir or os.environ.get("ANOMALY_RECON_CACHE") or cfg.output_dir


def dataset_dir(cfg: ExperimentConfig) -> str:
    return os.path.join(cache_root(cfg), "dataset")


def checkpoints_dir(cfg: ExperimentConfig) -> str:
    return os.path.join(cache_root(cfg), "checkpoints")


def scores_dir(cfg: ExperimentConfig, variant: str) -> str:
    return os.path.join(cfg.output_dir, "scores", variant)


def report_dir(cfg: ExperimentConfig) -> str:
    return os.path.join(cfg.output_dir, "report")


def manifest_for(cfg: ExperimentConfig) -> RunManifest:
    return RunManifest(cfg.output_dir, cfg.semantic_hash())


def _section_hash(cfg: ExperimentConfig, *sections: str) -> str:
    import hashlib

    payload = {name: cfg.to_dict()[name] for name in sections}
    payload["seed"] = cfg.seed
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def _dataset_manifest_path(cfg) -> str:
    return os.path.join(dataset_dir(cfg), "dataset_manifest.json")


def load_dataset_manifest(cfg) -> dict:
    path = _dataset_manifest_path(cfg)
    if not os.path.exists(path):
        raise MissingArtifactError(
            f"dataset manifest not found at {path}; run 'anomaly-recon gen-phantom' first"
        )
    with open(path) as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# stage: phantom dataset


def _phantom_config_for(cfg: ExperimentConfig, split: str, index: int, anomalies: dict) -> PhantomConfig:
    ds = cfg.dataset
    return PhantomConfig(
        shape=tuple(ds.shape),
        spacing=tuple(ds.spacing),
        ring_thickness=ds.ring_thickness,
        texture_sigma=ds.texture_sigma,
        texture_amp=ds.texture_amp,
        intensity_scale_range=tuple(ds.intensity_scale_range),
        anomalies=anomalies,
        deformation_amplitude=ds.deformation_amplitude,
        seed=fold_seed(cfg.seed, "phantom", split, index),
    )


def _lesion_count(mask: np.ndarray) -> int:
    from scipy import ndimage

    _, n = ndimage.label(mask)
    return int(n)


def stage_gen_phantom(cfg: ExperimentConfig, force: bool = False) -> dict:
    """Generate the phantom dataset; train split is strictly anomaly-free."""
    out = dataset_dir(cfg)
    manifest = manifest_for(cfg)
    sig = signature_of(cfg.semantic_hash(), "dataset", _section_hash(cfg, "dataset", "preprocess"))
    if manifest.is_done("dataset", sig) and os.path.exists(_dataset_manifest_path(cfg)):
        return load_dataset_manifest(cfg)
    if os.path.exists(out) and os.listdir(out) and not force:
        if os.path.exists(_dataset_manifest_path(cfg)):
            existing = load_dataset_manifest(cfg)
            if existing.get("signature") == sig:
                manifest.append("dataset", sig, outputs={"manifest": _dataset_manifest_path(cfg)})
                return existing
        raise InvalidArgumentError(
            f"dataset directory {out} is not empty; pass --force to regenerate"
        )
    os.makedirs(out, exist_ok=True)

    ds = cfg.dataset
    # deterministic assignment of abnormality classes to abnormal test volumes
    class_members: dict[str, set[int]] = {}
    for name, plan in ds.anomalies.items():
        if plan.volumes > ds.n_test_abnormal:
            raise InvalidArgumentError(
                f"{name}: {plan.volumes} volumes requested but only {ds.n_test_abnormal} abnormal volumes"
            )
        order = rng_for(cfg.seed, "alloc", name).permutation(ds.n_test_abnormal)
        class_members[name] = set(int(i) for i in order[: plan.volumes])

    records = []
    train_volumes = []
    plan_entries = []
    for split, count in (("train", ds.n_train), ("test_normal", ds.n_test_normal), ("test_abnormal", ds.n_test_abnormal)):
        for i in range(count):
            plan_entries.append((split, i))

    for split, i in plan_entries:
        if split == "train":
            vid = f"train_{i:03d}"
            anomalies = {}
        elif split == "test_normal":
            vid = f"test_{i:03d}"
            anomalies = {}
        else:
            vid = f"test_{ds.n_test_normal + i:03d}"
            anomalies = {
                name: AnomalySpec(
                    count_range=plan.count_range,
                    radius_range=plan.radius_range,
                    offset_range=plan.offset_range,
                )
                for name, plan in ds.anomalies.items()
                if i in class_members[name]
            }
        pcfg = _phantom_config_for(cfg, split, i, anomalies)
        volume, labels = generate_phantom(pcfg)
        volume.id = vid
        write_volume(out, volume)
        stored = {name: mask for name, mask in labels.masks.items() if name in ANATOMY_CLASSES or mask.any()}
        write_labels(out, vid, LabelVolume(masks=stored), volume.spacing)
        summary = {
            name: {
                "lesions": _lesion_count(labels.masks[name]),
                "voxels": int(labels.masks[name].sum()),
            }
            for name in ABNORMALITY_CLASSES
            if labels.masks[name].any()
        }
        records.append(
            {
                "id": vid,
                "split": "train" if split == "train" else "test",
                "abnormal": bool(summary),
                "anomalies": summary,
                "label_classes": sorted(stored),
            }
        )
        if split == "train":
            train_volumes.append(volume)

    # histogram reference: pooled resampled training volumes
    resampled = [resample_volume(v, cfg.preprocess.target_spacing) for v in train_volumes]
    reference = HistogramReference.from_volumes(resampled)
    with open(os.path.join(out, "histogram_reference.json"), "w") as fh:
        json.dump(reference.to_json(), fh)

    dataset_manifest = {
        "signature": sig,
        "seed": cfg.seed,
        "volumes": records,
        "classes": {"anatomy": list(ANATOMY_CLASSES), "abnormality": list(ABNORMALITY_CLASSES)},
        "histogram_reference": "histogram_reference.json",
        "requested": {
            name: {"volumes": plan.volumes, "count_range": list(plan.count_range)}
            for name, plan in ds.anomalies.items()
        },
    }
    with open(_dataset_manifest_path(cfg), "w") as fh:
        json.dump(dataset_manifest, fh, indent=1, sort_keys=True)
    manifest.append("dataset", sig, outputs={"manifest": _dataset_manifest_path(cfg)})
    return dataset_manifest


def load_histogram_reference(cfg) -> HistogramReference:
    path = os.path.join(dataset_dir(cfg), "histogram_reference.json")
    if not os.path.exists(path):
        raise MissingArtifactError(f"histogram reference not found at {path}")
    with open(path) as fh:
        return HistogramReference.from_json(json.load(fh))


# ---------------------------------------------------------------------------
# preprocessing applied to stored volumes


@dataclass
class PreparedVolume:
    volume_id: str
    slices: np.ndarray  # (K, H, W) in [-1, 1]
    degenerate: np.ndarray  # bool per slice (background-only planes)
    matched: Volume  # histogram-matched volume in slice geometry


def prepare_volume(cfg: ExperimentConfig, volume: Volume, reference: HistogramReference) -> PreparedVolume:
    size = cfg.preprocess.slice_size
    v = resample_volume(volume, cfg.preprocess.target_spacing)
    v = histogram_match(v, reference)
    planes = decompose_and_crop(v, size)
    slices = np.empty((len(planes), size, size), dtype=np.float32)
    degenerate = np.zeros(len(planes), dtype=bool)
    for k, plane in enumerate(planes):
        try:
            slices[k] = renormalize(plane, source_id=volume.id, index_k=k).data
        except DegenerateInputError:
            slices[k] = -1.0
            degenerate[k] = True
    matched = Volume(data=np.stack(planes).astype(np.float32), spacing=tuple(cfg.preprocess.target_spacing), id=volume.id)
    return PreparedVolume(volume_id=volume.id, slices=slices, degenerate=degenerate, matched=matched)


def prepare_labels(cfg: ExperimentConfig, labels: LabelVolume, spacing) -> LabelVolume:
    """Bring label masks into the slice geometry (nearest resample + crop/pad)."""
    size = cfg.preprocess.slice_size
    out = {}
    for name, mask in labels.masks.items():
        m = resample_labels_nearest(mask, spacing, cfg.preprocess.target_spacing)
        out[name] = np.stack([center_crop_pad(m[k], (size, size)) for k in range(m.shape[0])]).astype(np.uint8)
    return LabelVolume(masks=out)


def load_labels_for(cfg, volume_id: str, record: dict) -> LabelVolume:
    """Read stored masks; absent abnormality classes are all-zero."""
    ddir = dataset_dir(cfg)
    shape = None
    masks = {}
    for name in record.get("label_classes", []):
        vol, _ = read_volume(ddir, f"{volume_id}_{name}")
        masks[name] = vol.data.astype(np.uint8)
        shape = vol.data.shape
    if shape is None:
        raise MissingArtifactError(f"no label masks stored for {volume_id}")
    for name in ABNORMALITY_CLASSES:
        if name not in masks:
            masks[name] = np.zeros(shape, dtype=np.uint8)
    return LabelVolume(masks=masks)


def _train_slices(cfg: ExperimentConfig) -> np.ndarray:
    """All non-degenerate training slices, preprocessed, in manifest order."""
    dm = load_dataset_manifest(cfg)
    reference = load_histogram_reference(cfg)
    ddir = dataset_dir(cfg)
    chunks = []
    for record in dm["volumes"]:
        if record["split"] != "train":
            continue
        volume, _ = read_volume(ddir, record["id"])
        prepared = prepare_volume(cfg, volume, reference)
        chunks.append(prepared.slices[~prepared.degenerate])
    if not chunks:
        raise MissingArtifactError("no training slices available")
    return np.concatenate(chunks, axis=0)


# ---------------------------------------------------------------------------
# loss-curve CSV helpers


def _loss_csv_path(cfg, stage: str) -> str:
    return os.path.join(checkpoints_dir(cfg), f"loss_{stage}.csv")


def _write_loss_rows(path: str, fieldnames: list[str], rows: list[dict], truncate_to: int | None = None):
    os.makedirs(os.path.dirname(path), exist_ok=True)
    existing: list[dict] = []
    if truncate_to is not None and os.path.exists(path):
        with open(path) as fh:
            existing = [row for row in csv.DictReader(fh)][:truncate_to]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in existing + rows:
            writer.writerow(row)


def _append_loss_rows(path: str, fieldnames: list[str], rows: list[dict]):
    os.makedirs(os.path.dirname(path), exist_ok=True)
    new_file = not os.path.exists(path)
    with open(path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        if new_file:
            writer.writeheader()
        for row in rows:
            writer.writerow(row)


# ---------------------------------------------------------------------------
# stage: reconstruction training


def _recon_arch(cfg: ExperimentConfig) -> ReconArch:
    return ReconArch(
        encoder_filters=tuple(cfg.recon.encoder_filters),
        decoder_filters=tuple(cfg.recon.decoder_filters),
        latent_channels=cfg.recon.latent_channels,
        image_size=cfg.preprocess.slice_size,
    )


def recon_checkpoint_path(cfg, mode: str) -> str:
    return os.path.join(checkpoints_dir(cfg), f"recon_{mode}.ckpt")


def _augment_batch(cfg, slices: np.ndarray, seed_tags) -> np.ndarray:
    from .volume import Slice

    out = np.empty_like(slices)
    for i in range(slices.shape[0]):
        rng = rng_for(*seed_tags, i)
        s = Slice(data=slices[i], source_id="", index_k=0)
        out[i] = augment(s, rng, params=_draw_params(cfg, rng)).data
    return out


def _draw_params(cfg, rng):
    from .preprocess import draw_augment_params

    return draw_augment_params(
        rng,
        scale_range=cfg.preprocess.scale_range,
        rotation_deg=cfg.preprocess.rotation_deg,
        flip_prob=cfg.preprocess.flip_prob,
    )


def stage_train_recon(cfg: ExperimentConfig, mode: str) -> str:
    """Train the reconstruction network in ``vae`` or ``introvae`` mode."""
    if mode not in RECON_MODES:
        raise InvalidArgumentError(f"unknown recon mode {mode!r}")
    manifest = manifest_for(cfg)
    dm_path = _dataset_manifest_path(cfg)
    if not os.path.exists(dm_path):
        raise MissingArtifactError(f"dataset missing ({dm_path}); run gen-phantom first")
    sig = signature_of(
        cfg.semantic_hash(),
        f"recon_{mode}",
        _section_hash(cfg, "dataset", "preprocess", "recon"),
        content_hash(dm_path),
    )
    ckpt_path = recon_checkpoint_path(cfg, mode)
    stage_name = f"train_recon_{mode}"
    if manifest.is_done(stage_name, sig):
        return ckpt_path

    stage_cfg = getattr(cfg.recon, mode)
    slices = _train_slices(cfg)
    n = slices.shape[0]
    batch = min(stage_cfg.batch_size, n)
    steps_per_epoch = max(n // batch, 1)

    model = ReconModel(arch=_recon_arch(cfg), mode=mode, init_seed=fold_seed(cfg.seed, "recon", mode, "init"))
    opt_enc, opt_dec = make_optimizers(model, stage_cfg.lr_encoder, stage_cfg.lr_decoder)

    start_epoch = 0
    loss_fields = ["step", "l_ae", "l_reg_z", "l_margin_zprime", "l_encoder", "l_decoder"]
    if os.path.exists(ckpt_path):
        header, payload = load_checkpoint(ckpt_path, expected_kind="recon")
        if header.get("signature") == sig and header.get("epoch", 0) < stage_cfg.epochs:
            model.encoder.load_state_dict(payload["encoder"])
            model.decoder.load_state_dict(payload["decoder"])
            opt_enc.load_state_dict(payload["opt_encoder"])
            opt_dec.load_state_dict(payload["opt_decoder"])
            start_epoch = int(header["epoch"])
        elif header.get("signature") == sig and header.get("epoch", 0) >= stage_cfg.epochs:
            manifest.append(stage_name, sig, outputs={"checkpoint": ckpt_path})
            return ckpt_path

    csv_path = _loss_csv_path(cfg, f"recon_{mode}")
    if start_epoch == 0 and os.path.exists(csv_path):
        os.remove(csv_path)
    elif start_epoch > 0:
        _write_loss_rows(csv_path, loss_fields, [], truncate_to=start_epoch * steps_per_epoch)

    step = start_epoch * steps_per_epoch
    for epoch in range(start_epoch, stage_cfg.epochs):
        order = rng_for(cfg.seed, "recon", mode, "order", epoch).permutation(n)
        rows = []
        for b in range(steps_per_epoch):
            idx = order[b * batch : (b + 1) * batch]
            data = _augment_batch(cfg, slices[idx], (cfg.seed, "recon", mode, "aug", epoch, b))
            eps_seed = fold_seed(cfg.seed, "recon", mode, "eps", step)
            if mode == "vae":
                report = train_vae_step(
                    model,
                    data,
                    opt_enc,
                    opt_dec,
                    ae_weight=stage_cfg.ae_weight,
                    reg_weight=stage_cfg.reg_weight,
                    ssim_weight=stage_cfg.ssim_weight,
                    epsilon_seed=eps_seed,
                )
            else:
                report = train_introvae_step(
                    model,
                    data,
                    opt_enc,
                    opt_dec,
                    alpha=stage_cfg.alpha,
                    beta=stage_cfg.beta,
                    margin=stage_cfg.margin,
                    ssim_weight=stage_cfg.ssim_weight,
                    epsilon_seed=eps_seed,
                )
            rows.append({"step": step, **{k: f"{v:.6g}" for k, v in report.as_dict().items()}})
            step += 1
        _append_loss_rows(csv_path, loss_fields, rows)
        save_checkpoint(
            ckpt_path,
            "recon",
            header={
                "signature": sig,
                "mode": mode,
                "epoch": epoch + 1,
                "step": step,
                "arch": {
                    "encoder_filters": list(cfg.recon.encoder_filters),
                    "decoder_filters": list(cfg.recon.decoder_filters),
                    "latent_channels": cfg.recon.latent_channels,
                    "image_size": cfg.preprocess.slice_size,
                },
                "hyperparameters": {
                    "alpha": stage_cfg.alpha,
                    "beta": stage_cfg.beta,
                    "margin": stage_cfg.margin,
                    "ssim_weight": stage_cfg.ssim_weight,
                    "ae_weight": stage_cfg.ae_weight,
                    "reg_weight": stage_cfg.reg_weight,
                },
            },
            payload={
                "encoder": model.encoder.state_dict(),
                "decoder": model.decoder.state_dict(),
                "opt_encoder": opt_enc.state_dict(),
                "opt_decoder": opt_dec.state_dict(),
            },
        )
    plots.plot_loss_curve(csv_path, os.path.join(checkpoints_dir(cfg), f"loss_recon_{mode}.png"))
    manifest.append(stage_name, sig, outputs={"checkpoint": ckpt_path, "loss_curve": csv_path})
    return ckpt_path


def load_recon_model(cfg: ExperimentConfig, mode: str) -> tuple[ReconModel, dict]:
    path = recon_checkpoint_path(cfg, mode)
    header, payload = load_checkpoint(path, expected_kind="recon")
    arch = ReconArch(
        encoder_filters=tuple(header["arch"]["encoder_filters"]),
        decoder_filters=tuple(header["arch"]["decoder_filters"]),
        latent_channels=int(header["arch"]["latent_channels"]),
        image_size=int(header["arch"]["image_size"]),
    )
    model = ReconModel(arch=arch, mode=header["mode"], init_seed=0)
    model.encoder.load_state_dict(payload["encoder"])
    model.decoder.load_state_dict(payload["decoder"])
    model.eval()
    return model, header


# ---------------------------------------------------------------------------
# stage: discriminative training


def disc_checkpoint_path(cfg) -> str:
    return os.path.join(checkpoints_dir(cfg), "disc.ckpt")


def _triplet_config(cfg: ExperimentConfig) -> TripletConfig:
    d = cfg.disc
    return TripletConfig(
        patch_size=d.patch_size,
        max_shift=d.max_shift,
        scale_jitter=d.scale_jitter,
        intensity_scale=d.intensity_scale,
        intensity_offset=d.intensity_offset,
        min_neg_dist=d.min_neg_dist,
        body_threshold=d.body_threshold,
    )


def _make_embedder(cfg, init_seed: int) -> PatchEmbedder:
    torch.manual_seed(init_seed)
    return PatchEmbedder(
        filters=tuple(cfg.disc.filters),
        patch_size=cfg.disc.patch_size,
        hidden=cfg.disc.hidden,
        embed_dim=cfg.disc.embed_dim,
    )


def sample_triplet_batch(cfg, slices: np.ndarray, rng, tcfg: TripletConfig):
    from .volume import Slice

    triplets = []
    while len(triplets) < cfg.disc.batch_size:
        idx = int(rng.integers(slices.shape[0]))
        s = Slice(data=slices[idx], source_id=str(idx), index_k=0)
        try:
            triplets.append(sample_triplet(s, rng, tcfg))
        except DegenerateInputError:
            continue
    return triplet_batch_tensors(triplets)


def stage_train_disc(cfg: ExperimentConfig) -> str:
    manifest = manifest_for(cfg)
    dm_path = _dataset_manifest_path(cfg)
    if not os.path.exists(dm_path):
        raise MissingArtifactError(f"dataset missing ({dm_path}); run gen-phantom first")
    sig = signature_of(
        cfg.semantic_hash(),
        "disc",
        _section_hash(cfg, "dataset", "preprocess", "disc"),
        content_hash(dm_path),
    )
    ckpt_path = disc_checkpoint_path(cfg)
    if manifest.is_done("train_disc", sig):
        return ckpt_path

    slices = _train_slices(cfg)
    tcfg = _triplet_config(cfg)
    model = _make_embedder(cfg, fold_seed(cfg.seed, "disc", "init"))
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.disc.lr)

    start_step = 0
    if os.path.exists(ckpt_path):
        header, payload = load_checkpoint(ckpt_path, expected_kind="disc")
        if header.get("signature") == sig and header.get("step", 0) < cfg.disc.steps:
            model.load_state_dict(payload["model"])
            optimizer.load_state_dict(payload["optimizer"])
            start_step = int(header["step"])
            model.trained_steps = start_step
        elif header.get("signature") == sig:
            manifest.append("train_disc", sig, outputs={"checkpoint": ckpt_path})
            return ckpt_path

    csv_path = _loss_csv_path(cfg, "disc")
    if start_step == 0 and os.path.exists(csv_path):
        os.remove(csv_path)
    else:
        _write_loss_rows(csv_path, ["step", "triplet_loss"], [], truncate_to=start_step)

    checkpoint_every = 200
    rows = []
    for step in range(start_step, cfg.disc.steps):
        rng = rng_for(cfg.seed, "disc", "step", step)
        batch = sample_triplet_batch(cfg, slices, rng, tcfg)
        loss = train_discriminator_step(model, batch, optimizer)
        rows.append({"step": step, "triplet_loss": f"{loss:.6g}"})
        if (step + 1) % checkpoint_every == 0 or step + 1 == cfg.disc.steps:
            _append_loss_rows(csv_path, ["step", "triplet_loss"], rows)
            rows = []
            save_checkpoint(
                ckpt_path,
                "disc",
                header={
                    "signature": sig,
                    "step": step + 1,
                    "arch": {
                        "filters": list(cfg.disc.filters),
                        "patch_size": cfg.disc.patch_size,
                        "hidden": cfg.disc.hidden,
                        "embed_dim": cfg.disc.embed_dim,
                    },
                },
                payload={"model": model.state_dict(), "optimizer": optimizer.state_dict()},
            )
    plots.plot_loss_curve(csv_path, os.path.join(checkpoints_dir(cfg), "loss_disc.png"))
    manifest.append("train_disc", sig, outputs={"checkpoint": ckpt_path, "loss_curve": csv_path})
    return ckpt_path


def load_embedder(cfg: ExperimentConfig) -> PatchEmbedder:
    header, payload = load_checkpoint(disc_checkpoint_path(cfg), expected_kind="disc")
    arch = header["arch"]
    torch.manual_seed(0)
    model = PatchEmbedder(
        filters=tuple(arch["filters"]),
        patch_size=int(arch["patch_size"]),
        hidden=int(arch["hidden"]),
        embed_dim=int(arch["embed_dim"]),
    )
    model.load_state_dict(payload["model"])
    model.trained_steps = int(header.get("step", 0))
    model.eval()
    return model


# ---------------------------------------------------------------------------
# stage: segmentation training


def seg_checkpoint_path(cfg) -> str:
    return os.path.join(checkpoints_dir(cfg), "seg.ckpt")


def _seg_split(cfg, train_ids: list[str]) -> dict[str, list[str]]:
    order = rng_for(cfg.seed, "seg", "split").permutation(len(train_ids))
    n = len(train_ids)
    n_train = int(round(cfg.seg.split[0] * n))
    n_val = int(round(cfg.seg.split[1] * n))
    ids = [train_ids[i] for i in order]
    return {
        "train": ids[:n_train],
        "val": ids[n_train : n_train + n_val],
        "test": ids[n_train + n_val :],
    }


def _seg_pairs(cfg, volume_ids: list[str], records: dict) -> tuple[np.ndarray, np.ndarray]:
    """Non-degenerate (slice, class-index-map) pairs for the given volumes."""
    reference = load_histogram_reference(cfg)
    ddir = dataset_dir(cfg)
    size = cfg.preprocess.slice_size
    xs, ys = [], []
    for vid in volume_ids:
        volume, _ = read_volume(ddir, vid)
        prepared = prepare_volume(cfg, volume, reference)
        labels = prepare_labels(cfg, load_labels_for(cfg, vid, records[vid]), volume.spacing)
        for k in range(prepared.slices.shape[0]):
            if prepared.degenerate[k]:
                continue
            xs.append(prepared.slices[k])
            ys.append(anatomy_index_map(labels.masks, k))
    return np.stack(xs), np.stack(ys)


def _rotate_pair(img: np.ndarray, idx_map: np.ndarray, angle_deg: float):
    from scipy import ndimage as ndi

    if angle_deg == 0.0:
        return img, idx_map
    img_r = ndi.rotate(img, angle_deg, reshape=False, order=1, mode="constant", cval=-1.0)
    lab_r = ndi.rotate(idx_map, angle_deg, reshape=False, order=0, mode="constant", cval=0)
    return np.clip(img_r, -1.0, 1.0), lab_r


def stage_train_seg(cfg: ExperimentConfig) -> str:
    manifest = manifest_for(cfg)
    dm_path = _dataset_manifest_path(cfg)
    if not os.path.exists(dm_path):
        raise MissingArtifactError(f"dataset missing ({dm_path}); run gen-phantom first")
    sig = signature_of(
        cfg.semantic_hash(),
        "seg",
        _section_hash(cfg, "dataset", "preprocess", "seg"),
        content_hash(dm_path),
    )
    ckpt_path = seg_checkpoint_path(cfg)
    if manifest.is_done("train_seg", sig):
        return ckpt_path

    dm = load_dataset_manifest(cfg)
    records = {r["id"]: r for r in dm["volumes"]}
    train_ids = [r["id"] for r in dm["volumes"] if r["split"] == "train"]
    split = _seg_split(cfg, train_ids)
    xs, ys = _seg_pairs(cfg, split["train"], records)
    n_classes = len(SEG_CLASS_NAMES)

    model = SegModel(
        n_classes=n_classes, filters=tuple(cfg.seg.filters), init_seed=fold_seed(cfg.seed, "seg", "init")
    )
    optimizer = torch.optim.Adam(model.net.parameters(), lr=cfg.seg.lr, weight_decay=cfg.seg.weight_decay)

    start_step = 0
    if os.path.exists(ckpt_path):
        header, payload = load_checkpoint(ckpt_path, expected_kind="seg")
        if header.get("signature") == sig and header.get("step", 0) < cfg.seg.steps:
            model.net.load_state_dict(payload["model"])
            optimizer.load_state_dict(payload["optimizer"])
            start_step = int(header["step"])
            model.trained_steps = start_step
        elif header.get("signature") == sig:
            manifest.append("train_seg", sig, outputs={"checkpoint": ckpt_path})
            return ckpt_path

    csv_path = _loss_csv_path(cfg, "seg")
    if start_step == 0 and os.path.exists(csv_path):
        os.remove(csv_path)
    else:
        _write_loss_rows(csv_path, ["step", "seg_loss"], [], truncate_to=start_step)

    batch = min(cfg.seg.batch_size, xs.shape[0])
    checkpoint_every = 100
    rows = []
    for step in range(start_step, cfg.seg.steps):
        rng = rng_for(cfg.seed, "seg", "step", step)
        idx = rng.integers(xs.shape[0], size=batch)
        imgs, labs = [], []
        for i in idx:
            angle = float(rng.uniform(-cfg.seg.rotation_deg, cfg.seg.rotation_deg))
            img, lab = _rotate_pair(xs[i], ys[i], angle)
            imgs.append(img)
            labs.append(labels_to_onehot(lab, n_classes))
        loss = train_segmentation_step(
            model,
            (np.stack(imgs), np.stack(labs)),
            optimizer,
            focal_gamma=cfg.seg.focal_gamma,
            dice_eps=cfg.seg.dice_eps,
        )
        rows.append({"step": step, "seg_loss": f"{loss:.6g}"})
        if (step + 1) % checkpoint_every == 0 or step + 1 == cfg.seg.steps:
            _append_loss_rows(csv_path, ["step", "seg_loss"], rows)
            rows = []
            save_checkpoint(
                ckpt_path,
                "seg",
                header={
                    "signature": sig,
                    "step": step + 1,
                    "arch": {"filters": list(cfg.seg.filters), "n_classes": n_classes},
                    "split": split,
                },
                payload={"model": model.net.state_dict(), "optimizer": optimizer.state_dict()},
            )

    # held-out Dice on the seg test volumes
    metrics = _seg_holdout_metrics(cfg, model, split, records)
    with open(os.path.join(checkpoints_dir(cfg), "seg_metrics.json"), "w") as fh:
        json.dump(metrics, fh, indent=1, sort_keys=True)
    plots.plot_loss_curve(csv_path, os.path.join(checkpoints_dir(cfg), "loss_seg.png"))
    manifest.append(
        "train_seg",
        sig,
        outputs={
            "checkpoint": ckpt_path,
            "loss_curve": csv_path,
            "metrics": os.path.join(checkpoints_dir(cfg), "seg_metrics.json"),
        },
    )
    return ckpt_path


def _seg_holdout_metrics(cfg, model: SegModel, split: dict, records: dict) -> dict:
    out = {}
    for part in ("val", "test"):
        if not split[part]:
            continue
        xs, ys = _seg_pairs(cfg, split[part], records)
        per_class: dict[str, list[float]] = {name: [] for name in SEG_CLASS_NAMES[1:]}
        for start in range(0, xs.shape[0], 32):
            probs = model.predict_probs(xs[start : start + 32])
            pred = probs.argmax(dim=1).cpu().numpy()
            truth = ys[start : start + 32]
            for cls_idx, name in enumerate(SEG_CLASS_NAMES[1:], start=1):
                for b in range(pred.shape[0]):
                    if (truth[b] == cls_idx).any() or (pred[b] == cls_idx).any():
                        per_class[name].append(dice_binary(pred[b] == cls_idx, truth[b] == cls_idx))
        dice = {name: float(np.mean(vals)) for name, vals in per_class.items() if vals}
        out[part] = {"per_class_dice": dice, "mean_dice": float(np.mean(list(dice.values())))}
    out["split"] = {k: v for k, v in split.items()}
    return out


def load_seg_model(cfg: ExperimentConfig) -> SegModel:
    header, payload = load_checkpoint(seg_checkpoint_path(cfg), expected_kind="seg")
    model = SegModel(n_classes=int(header["arch"]["n_classes"]), filters=tuple(header["arch"]["filters"]), init_seed=0)
    model.net.load_state_dict(payload["model"])
    model.trained_steps = int(header.get("step", 0))
    model.net.eval()
    return model


# ---------------------------------------------------------------------------
# stage: scoring


def _variant_recon_mode(variant: str) -> str:
    if variant not in VARIANTS:
        raise InvalidArgumentError(f"unknown scoring variant {variant!r}; choose from {VARIANTS}")
    return "vae" if variant == "vae" else "introvae"


def reconstruct_slices(
    model: ReconModel,
    slices: np.ndarray,
    use_latent_search: bool = False,
    steps: int = 100,
    lr: float = 1e-3,
    ssim_weight: float = 1.0,
    batch: int = 32,
) -> tuple[np.ndarray, dict]:
    """Posterior-mean reconstructions, optionally refined by latent search."""
    model.eval()
    recons = np.empty_like(slices)
    stats = {"initial_loss": [], "final_loss": [], "diverged": []}
    for start in range(0, slices.shape[0], batch):
        chunk = slices[start : start + batch]
        if use_latent_search:
            result = latent_search(model, chunk, steps=steps, lr=lr, ssim_weight=ssim_weight)
            recons[start : start + batch] = result.reconstruction[:, 0].cpu().numpy()
            stats["initial_loss"].extend(result.initial_loss.tolist())
            stats["final_loss"].extend(result.final_loss.tolist())
            stats["diverged"].extend([bool(d) for d in result.diverged])
        else:
            with torch.no_grad():
                mu, _ = encode(model, chunk)
                recon = decode(model, mu)
            recons[start : start + batch] = recon[:, 0].cpu().numpy()
    return recons, stats


def stage_score(cfg: ExperimentConfig, variant: str) -> str:
    """Score all test volumes with one reconstruction variant."""
    mode = _variant_recon_mode(variant)
    manifest = manifest_for(cfg)
    recon_ckpt = recon_checkpoint_path(cfg, mode)
    disc_ckpt = disc_checkpoint_path(cfg)
    for path, hint in ((recon_ckpt, f"train {mode}"), (disc_ckpt, "train disc")):
        if not os.path.exists(path):
            raise MissingArtifactError(f"checkpoint missing ({path}); run '{hint}' first")
    sig = signature_of(
        cfg.semantic_hash(),
        f"score_{variant}",
        _section_hash(cfg, "dataset", "preprocess", "scoring"),
        content_hash(recon_ckpt, disc_ckpt),
    )
    out_dir = scores_dir(cfg, variant)
    stage_name = f"score_{variant}"
    if manifest.is_done(stage_name, sig):
        return out_dir

    recon_model, recon_header = load_recon_model(cfg, mode)
    embedder = load_embedder(cfg)
    reference = load_histogram_reference(cfg)
    dm = load_dataset_manifest(cfg)
    ddir = dataset_dir(cfg)
    ssim_weight = float(recon_header["hyperparameters"]["ssim_weight"])
    use_search = variant == "introvae_latsearch"

    os.makedirs(out_dir, exist_ok=True)
    search_stats = {}
    outputs = {}
    for record in dm["volumes"]:
        if record["split"] != "test":
            continue
        vid = record["id"]
        volume, _ = read_volume(ddir, vid)
        prepared = prepare_volume(cfg, volume, reference)
        recons, stats = reconstruct_slices(
            recon_model,
            prepared.slices,
            use_latent_search=use_search,
            steps=cfg.scoring.latent_search_steps,
            lr=cfg.scoring.latent_search_lr,
            ssim_weight=ssim_weight,
            batch=cfg.scoring.slice_batch,
        )
        if use_search:
            search_stats[vid] = {**stats, "degenerate": prepared.degenerate.tolist()}

        slice_maps, l1_maps = [], []
        for k in range(prepared.slices.shape[0]):
            m = abnormality_map(
                embedder,
                prepared.slices[k],
                recons[k],
                stride=cfg.scoring.stride,
                batch_size=cfg.scoring.patch_batch,
            )
            m.index_k = k
            slice_maps.append(m)
            l1 = l1_residual_map(prepared.slices[k], recons[k])
            l1.index_k = k
            l1_maps.append(l1)
        raw3d = volume_assemble(slice_maps)
        l1_3d = volume_assemble(l1_maps)
        zscored = zscore_normalize(raw3d, region=None)

        spacing = tuple(cfg.preprocess.target_spacing)
        write_volume(
            out_dir,
            Volume(data=zscored.scores, spacing=spacing, id=f"score_{vid}"),
            extra_meta={"normalization": zscored.normalization, "stride": zscored.stride},
        )
        write_volume(
            out_dir,
            Volume(data=raw3d.scores, spacing=spacing, id=f"score_raw_{vid}"),
            extra_meta={"normalization": "raw", "stride": raw3d.stride},
        )
        write_volume(
            out_dir,
            Volume(data=l1_3d.scores, spacing=spacing, id=f"l1_raw_{vid}"),
            extra_meta={"normalization": "raw", "stride": 1},
        )
        write_volume(out_dir, Volume(data=recons, spacing=spacing, id=f"recon_{vid}"))
        outputs[f"score_{vid}"] = os.path.join(out_dir, f"score_{vid}.raw")

    if use_search:
        stats_path = os.path.join(out_dir, "latent_search_stats.json")
        with open(stats_path, "w") as fh:
            json.dump(search_stats, fh, indent=1, sort_keys=True)
        outputs["latent_search_stats"] = stats_path
    manifest.append(stage_name, sig, outputs=outputs)
    return out_dir


def load_score_map(cfg, variant: str, volume_id: str, raw: bool = False) -> ScoreMap:
    prefix = "score_raw_" if raw else "score_"
    vol, meta = read_volume(scores_dir(cfg, variant), f"{prefix}{volume_id}")
    return ScoreMap(
        scores=vol.data,
        normalization=meta.get("normalization", "raw"),
        stride=int(meta.get("stride", 1)),
    )


# ---------------------------------------------------------------------------
# stage: evaluation


def _fidelity_rows(cfg, seg_model: SegModel, dm: dict, records: dict) -> list[dict]:
    """Per-slice quality/overlap for every variant over non-degenerate test slices."""
    from .fidelity import overlap_score, quality_score

    reference = load_histogram_reference(cfg)
    ddir = dataset_dir(cfg)
    rows = []
    for record in dm["volumes"]:
        if record["split"] != "test":
            continue
        vid = record["id"]
        volume, _ = read_volume(ddir, vid)
        prepared = prepare_volume(cfg, volume, reference)
        recons = {v: read_volume(scores_dir(cfg, v), f"recon_{vid}")[0].data for v in VARIANTS}
        for k in range(prepared.slices.shape[0]):
            if prepared.degenerate[k]:
                continue
            for variant in VARIANTS:
                x, x_hat = prepared.slices[k], recons[variant][k]
                try:
                    ov = overlap_score(seg_model, x, x_hat)
                except InvalidArgumentError:
                    continue
                rows.append(
                    {
                        "volume": vid,
                        "k": k,
                        "variant": variant,
                        "quality": quality_score(seg_model, x, x_hat),
                        "overlap": ov,
                    }
                )
    return rows


def _snr_rows(cfg, dm: dict) -> list[dict]:
    """In-lesion vs out-of-lesion mean raw score, embedding map vs L1 residual."""
    reference = load_histogram_reference(cfg)
    ddir = dataset_dir(cfg)
    records = {r["id"]: r for r in dm["volumes"]}
    rows = []
    for record in dm["volumes"]:
        if record["split"] != "test" or not record["abnormal"]:
            continue
        if "metastatic_tumor_analog" not in record["anomalies"]:
            continue
        vid = record["id"]
        volume, _ = read_volume(ddir, vid)
        prepared = prepare_volume(cfg, volume, reference)
        labels = prepare_labels(cfg, load_labels_for(cfg, vid, records[vid]), volume.spacing)
        mask3d = body_mask(prepared.matched)
        lesion3d = labels.masks["metastatic_tumor_analog"].astype(bool)
        for variant in VARIANTS:
            emb = read_volume(scores_dir(cfg, variant), f"score_raw_{vid}")[0].data
            l1 = read_volume(scores_dir(cfg, variant), f"l1_raw_{vid}")[0].data
            for k in range(prepared.slices.shape[0]):
                lesion = lesion3d[k]
                outside = mask3d[k] & ~lesion
                if lesion.sum() < 3 or outside.sum() < 10:
                    continue
                rows.append(
                    {
                        "volume": vid,
                        "k": k,
                        "variant": variant,
                        "embedding_ratio": float(emb[k][lesion].mean() / max(emb[k][outside].mean(), 1e-12)),
                        "l1_ratio": float(l1[k][lesion].mean() / max(l1[k][outside].mean(), 1e-12)),
                    }
                )
    return rows


def _stat(values) -> dict:
    arr = np.asarray(list(values), dtype=np.float64)
    return {"mean": float(arr.mean()), "std": float(arr.std()), "n": int(arr.size)}


def _gap(a: list[float], b: list[float]) -> dict:
    """Paired mean difference a-b with its standard error."""
    diff = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    se = float(diff.std(ddof=1) / np.sqrt(diff.size)) if diff.size > 1 else 0.0
    return {"mean": float(diff.mean()), "std_error": se, "n": int(diff.size)}


def stage_evaluate(cfg: ExperimentConfig) -> str:
    """Aggregate detection, fidelity, signal-to-noise, and rectification metrics."""
    from .evaluation import aggregate_class_metrics, evaluate_detection

    manifest = manifest_for(cfg)
    dm = load_dataset_manifest(cfg)
    records = {r["id"]: r for r in dm["volumes"]}
    score_inputs = []
    for variant in VARIANTS:
        vdir = scores_dir(cfg, variant)
        if not os.path.isdir(vdir):
            raise MissingArtifactError(f"scores missing for variant {variant!r} ({vdir}); run cmd score first")
        score_inputs.append(vdir)
    if not os.path.exists(seg_checkpoint_path(cfg)):
        raise MissingArtifactError(f"segmentation checkpoint missing; run 'train seg' first")

    abnormal = [r for r in dm["volumes"] if r["split"] == "test" and r["abnormal"]]
    if not abnormal:
        raise InvalidArgumentError("no abnormal volumes in the test split; nothing to evaluate")

    sig = signature_of(
        cfg.semantic_hash(),
        "evaluate",
        _section_hash(cfg, "dataset", "preprocess", "scoring", "evaluation"),
        content_hash(seg_checkpoint_path(cfg)),
        *[content_hash(os.path.join(d, "score_" + abnormal[0]["id"] + ".raw")) for d in score_inputs],
    )
    rdir = report_dir(cfg)
    report_path = os.path.join(rdir, "report.json")
    if manifest.is_done("evaluate", sig):
        return report_path
    os.makedirs(rdir, exist_ok=True)
    figures_dir = os.path.join(rdir, "figures")
    os.makedirs(figures_dir, exist_ok=True)

    reference = load_histogram_reference(cfg)
    ddir = dataset_dir(cfg)
    seg_model = load_seg_model(cfg)

    # detection: per-volume rectified ROC + full-image ROC for the rectification section
    detection: dict[str, list] = {v: [] for v in VARIANTS}
    rectification: dict[str, dict] = {v: {} for v in VARIANTS}
    roc_curves: dict[str, dict] = {v: {} for v in VARIANTS}
    for record in abnormal:
        vid = record["id"]
        volume, _ = read_volume(ddir, vid)
        prepared = prepare_volume(cfg, volume, reference)
        labels = prepare_labels(cfg, load_labels_for(cfg, vid, records[vid]), volume.spacing)
        bmask = body_mask(prepared.matched)
        full = np.ones_like(bmask, dtype=bool)
        for variant in VARIANTS:
            smap = load_score_map(cfg, variant, vid)
            result = evaluate_detection(smap, labels, bmask, n_thresholds=cfg.evaluation.n_thresholds)
            detection[variant].append(result)
            full_result = evaluate_detection(smap, labels, full, n_thresholds=cfg.evaluation.n_thresholds)
            rectification[variant][vid] = {
                "full_image_auc": full_result.auc,
                "body_masked_auc": result.auc,
            }
            for name, cls in result.classes.items():
                roc_curves[variant].setdefault(name, []).append((result.fpr, cls.tpr))

    # fidelity: per-slice quality/overlap for each variant
    fid_rows = _fidelity_rows(cfg, seg_model, dm, records)
    fid_csv = os.path.join(rdir, "fidelity_slices.csv")
    with open(fid_csv, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["volume", "k", "variant", "quality", "overlap"])
        writer.writeheader()
        for row in fid_rows:
            writer.writerow(row)

    snr_rows = _snr_rows(cfg, dm)
    snr_csv = os.path.join(rdir, "snr_slices.csv")
    with open(snr_csv, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["volume", "k", "variant", "embedding_ratio", "l1_ratio"])
        writer.writeheader()
        for row in snr_rows:
            writer.writerow(row)

    # assemble the report
    variants_payload = {}
    fid_by_variant = {
        v: [r for r in fid_rows if r["variant"] == v] for v in VARIANTS
    }
    paired: dict[str, dict] = {}
    for v in VARIANTS:
        keyed = {(r["volume"], r["k"]): r for r in fid_by_variant[v]}
        paired[v] = keyed
    common_keys = set.intersection(*[set(paired[v]) for v in VARIANTS]) if fid_rows else set()
    common = sorted(common_keys)

    order = {"vae": 0, "introvae": 1, "introvae_latsearch": 2}
    for variant in VARIANTS:
        rows = fid_by_variant[variant]
        fidelity = {
            "quality_score": _stat([r["quality"] for r in rows]) if rows else _stat([0.0]),
            "overlap_score": _stat([r["overlap"] for r in rows]) if rows else _stat([0.0]),
        }
        gaps_q, gaps_o = {}, {}
        for other in VARIANTS:
            if order[other] >= order[variant] or not common:
                continue
            gaps_q[other] = _gap(
                [paired[variant][key]["quality"] for key in common],
                [paired[other][key]["quality"] for key in common],
            )
            gaps_o[other] = _gap(
                [paired[variant][key]["overlap"] for key in common],
                [paired[other][key]["overlap"] for key in common],
            )
        if gaps_q:
            fidelity["quality_gap_vs"] = gaps_q
            fidelity["overlap_gap_vs"] = gaps_o
        srows = [r for r in snr_rows if r["variant"] == variant]
        payload = {
            "detection": aggregate_class_metrics(detection[variant]),
            "fidelity": fidelity,
        }
        if srows:
            beats = [r["embedding_ratio"] > r["l1_ratio"] for r in srows]
            payload["signal_noise"] = {
                "embedding_ratio_median": float(np.median([r["embedding_ratio"] for r in srows])),
                "l1_ratio_median": float(np.median([r["l1_ratio"] for r in srows])),
                "embedding_beats_l1_fraction": float(np.mean(beats)),
                "n_abnormal_slices": len(srows),
            }
        variants_payload[variant] = payload

    seg_metrics_path = os.path.join(checkpoints_dir(cfg), "seg_metrics.json")
    seg_sanity = {}
    if os.path.exists(seg_metrics_path):
        with open(seg_metrics_path) as fh:
            seg_metrics = json.load(fh)
        test_part = seg_metrics.get("test") or seg_metrics.get("val") or {}
        seg_sanity = {
            "mean_dice": test_part.get("mean_dice", 0.0),
            "per_class_dice": test_part.get("per_class_dice", {}),
        }

    report = {
        "schema_version": 1,
        "config_hash": cfg.semantic_hash(),
        "seed": cfg.seed,
        "profile": cfg.profile,
        "n_test_volumes": len([r for r in dm["volumes"] if r["split"] == "test"]),
        "variants": variants_payload,
        "rectification": rectification,
        "segmentation_sanity": seg_sanity,
    }
    _validate_report(report)
    with open(report_path, "w") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)

    # Table-I style delimited output
    csv_path = os.path.join(rdir, "report.csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["abnormal_class", "variant", "roc_auc_mean", "roc_auc_std", "sensitivity", "specificity", "precision", "f1"]
        )
        for name in ABNORMALITY_CLASSES:
            for variant in VARIANTS:
                metrics = variants_payload[variant]["detection"].get(name)
                if metrics is None:
                    continue
                writer.writerow(
                    [
                        name,
                        variant,
                        f"{metrics['roc_auc']['mean']:.4f}",
                        f"{metrics['roc_auc']['std']:.4f}",
                        f"{metrics['sensitivity']['mean']:.4f}",
                        f"{metrics['specificity']['mean']:.4f}",
                        f"{metrics['precision']['mean']:.4f}",
                        f"{metrics['f1']['mean']:.4f}",
                    ]
                )

    plots.plot_roc_curves(roc_curves, figures_dir)
    plots.plot_fidelity(fid_rows, os.path.join(figures_dir, "fidelity_scores.png"))
    manifest.append(
        "evaluate",
        sig,
        outputs={"report": report_path, "table": csv_path, "fidelity_csv": fid_csv, "snr_csv": snr_csv},
    )
    return report_path


def _validate_report(report: dict) -> None:
    import jsonschema
    from importlib import resources

    with resources.files("anomaly_recon.schemas").joinpath("evaluation_report.schema.json").open() as fh:
        schema = json.load(fh)
    jsonschema.validate(report, schema)


# ---------------------------------------------------------------------------
# full reproduction


def reproduce(cfg: ExperimentConfig, force: bool = False) -> dict:
    """Run the whole pipeline; returns stage outputs and wall time."""
    t0 = time.time()
    stage_gen_phantom(cfg, force=force)
    for mode in RECON_MODES:
        stage_train_recon(cfg, mode)
    stage_train_disc(cfg)
    stage_train_seg(cfg)
    for variant in VARIANTS:
        stage_score(cfg, variant)
    report_path = stage_evaluate(cfg)
    elapsed = time.time() - t0
    manifest_for(cfg).append("reproduce", cfg.semantic_hash(), wall_time_s=elapsed)
    return {"report": report_path, "wall_time_s": elapsed}
