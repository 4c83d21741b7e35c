"""Batch export: images + masks -> per-image feature containers + index."""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
from PIL import Image

from .backbone import build_feature_extractor, calibrate_batchnorm, extract_features
from .config import ExportConfig
from .containers import write_image_container
from .masks import downsample_mask

log = logging.getLogger(__name__)

CALIBRATION_SAMPLES = 12


def load_image(path, resolution: int) -> np.ndarray:
    """RGB image resized to (resolution, resolution), float in [0, 1]."""
    with Image.open(path) as img:
        rgb = img.convert("RGB").resize((resolution, resolution), Image.BILINEAR)
    return np.asarray(rgb, dtype=np.float32) / 255.0


def load_mask(path) -> np.ndarray:
    """Binary {0, 1} mask at its native resolution (threshold at mid-grey)."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"))
    return (arr > 127).astype(np.uint8)


def export_task_set(cfg: ExportConfig):
    """Run every image through the backbone and write containers + index.

    Decode failures are skipped and logged; the index lists only the
    exported images. Returns (index_path, records) where each record is
    (class_id, image_id, container_filename).
    """
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    extractor = build_feature_extractor(cfg.backbone, cfg.weights, cfg.layer)
    if cfg.weights == "calibrated":
        samples = []
        for item in cfg.items[:CALIBRATION_SAMPLES]:
            try:
                samples.append(load_image(item.image_path, cfg.resolution))
            except Exception as exc:
                log.warning("calibration skips %s: %s", item.image_id, exc)
        calibrate_batchnorm(extractor, samples)

    records = []
    for item in cfg.items:
        try:
            image = load_image(item.image_path, cfg.resolution)
            mask_full = load_mask(item.mask_path)
        except Exception as exc:  # undecodable input: skip-and-log
            log.warning("skipping %s: %s", item.image_id, exc)
            continue
        feats = extract_features(extractor, image)
        mask = downsample_mask(mask_full, feats.shape[:2])
        name = f"{item.class_id:03d}_{item.image_id}.rpri"
        write_image_container(out_dir / name, feats, mask, class_id=item.class_id)
        records.append((item.class_id, item.image_id, name))

    index_path = out_dir / "index.tsv"
    with open(index_path, "w", encoding="utf-8") as fh:
        for class_id, image_id, name in records:
            fh.write(f"{class_id}\t{image_id}\t{name}\n")
    return index_path, records
