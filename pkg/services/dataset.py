"""
Clip manifests and the synthetic laryngoscopy-like dataset generator.

A manifest is JSON lines, one clip per line:
    {"id": "...", "frame_dir": "...", "frame_count": 64, "tri_label": "benign", "fold": 3}
``frame_dir`` may be relative to the manifest's directory; ``fold`` is optional.
"""
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd
from tqdm import tqdm

from models.clip_info import FRAME_PATTERN, TRI_LABELS, ManifestEntry, SynthSpec, binarize
from models.errors import ManifestError, ValidationError
from services.clip_pipeline import write_ppm

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.jsonl"
REQUIRED_COLUMNS = ("id", "frame_dir", "frame_count", "tri_label")
BASE_COLOR = np.array([150.0, 95.0, 90.0])
MOTION_PERIOD = 16

__all__ = ["load_manifest", "write_manifest", "binarize", "generate_synthetic", "render_clip"]


def load_manifest(path) -> List[ManifestEntry]:
    """Parse and validate a JSON-lines manifest; relative frame directories resolve against its folder."""
    if not os.path.isfile(path):
        raise ManifestError(f"Manifest {path} does not exist")
    try:
        frame = pd.read_json(path, lines=True, dtype={"id": str, "frame_dir": str, "tri_label": str})
    except ValueError as e:
        raise ManifestError(f"Manifest {path} is not valid JSON lines: {e}") from e
    if frame.empty:
        raise ManifestError(f"Manifest {path} holds no entries")
    missing = [c for c in REQUIRED_COLUMNS if c not in frame.columns]
    if missing:
        raise ManifestError(f"Manifest {path} lacks columns: {', '.join(missing)}")
    unknown = sorted(set(frame.columns) - set(REQUIRED_COLUMNS) - {"fold"})
    if unknown:
        raise ManifestError(f"Manifest {path} has unknown fields: {', '.join(unknown)}")

    duplicated = frame.loc[frame["id"].duplicated(), "id"].tolist()
    if duplicated:
        logger.warning("Duplicate ids in %s: %s", path, duplicated)
        raise ManifestError(f"Duplicate clip id {duplicated[0]!r} in {path}")

    base_dir = os.path.dirname(os.path.abspath(path))
    entries = []
    for row in frame.itertuples(index=False):
        label = str(row.tri_label)
        if label not in TRI_LABELS:
            logger.warning("Unknown label %r for %s in %s", label, row.id, path)
            raise ManifestError(f"Entry {row.id}: unknown label {label!r}; expected one of {', '.join(TRI_LABELS)}")
        frame_dir = os.path.join(base_dir, str(row.frame_dir))
        if not os.path.isdir(frame_dir):
            logger.warning("Missing frame directory %s", frame_dir)
            raise ManifestError(f"Entry {row.id}: frame directory {frame_dir} does not exist")
        fold = getattr(row, "fold", None)
        fold = None if fold is None or pd.isna(fold) else int(fold)
        try:
            entries.append(ManifestEntry(id=str(row.id), frame_dir=os.path.normpath(frame_dir),
                                         frame_count=int(row.frame_count), tri_label=label, fold=fold))
        except ValidationError as e:
            raise ManifestError(str(e)) from e
    logger.info("Loaded %d manifest entries from %s", len(entries), path)
    return entries


def write_manifest(entries: Sequence[ManifestEntry], path) -> str:
    """Write entries as canonical JSON lines (sorted keys) with frame dirs relative to the manifest."""
    base_dir = os.path.dirname(os.path.abspath(path))
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for entry in entries:
            f.write(json.dumps(entry.to_record(base_dir), sort_keys=True) + "\n")
    return path


def _background(rng, h, w, margin):
    """Smooth colored field with a per-clip offset and gradient, ``margin`` pixels wider on each side."""
    color = BASE_COLOR + rng.uniform(-8.0, 8.0, size=3)
    angle = rng.uniform(0.0, 2.0 * np.pi)
    slope = rng.uniform(-12.0, 12.0)
    yy, xx = np.mgrid[-margin:h + margin, -margin:w + margin].astype(np.float64)
    ramp = slope * (((xx + 0.5) / w - 0.5) * np.cos(angle) + ((yy + 0.5) / h - 0.5) * np.sin(angle))
    return color[None, None, :] + ramp[..., None]


def _blob_geometry(rng, spec: SynthSpec):
    h, w = spec.resolution
    radius = rng.uniform(*spec.blob_radius) * min(h, w)
    cy = rng.uniform(0.4, 0.6) * h
    cx = rng.uniform(0.4, 0.6) * w
    return radius, cy, cx


def _periodic(t, amplitude, phase=0.0):
    return amplitude * np.sin(2.0 * np.pi * t / MOTION_PERIOD + phase)


def render_clip(tri_label: str, spec: SynthSpec, rng) -> np.ndarray:
    """
    Frames [F, H, W, 3] uint8 for one clip.

    Every motif is zero-mean over the frame, so frame mean color carries no class
    information: malignant clips get a rough texture patch with a jittering
    irregular boundary, benign clips a smooth centre-surround blob drifting
    periodically, normal clips only a periodic camera drift.
    """
    h, w = spec.resolution
    margin = int(np.ceil(spec.motion_amplitude)) + 1
    field = _background(rng, h, w, margin)
    radius, cy, cx = _blob_geometry(rng, spec)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    phase = rng.uniform(0.0, 2.0 * np.pi)
    harmonics = np.arange(2, 6)
    amplitudes = rng.uniform(0.08, 0.2, size=harmonics.size)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=harmonics.size)
    tint = np.array([1.0, 0.6, 0.6])

    frames = np.empty((spec.frames, h, w, 3), dtype=np.uint8)
    for t in range(spec.frames):
        if tri_label == "normal":
            dy = int(round(_periodic(t, spec.motion_amplitude, phase)))
            dx = int(round(_periodic(t, spec.motion_amplitude, phase + np.pi / 2)))
            image = field[margin + dy:margin + dy + h, margin + dx:margin + dx + w].copy()
        else:
            image = field[margin:margin + h, margin:margin + w].copy()

        if tri_label == "benign":
            by = cy + _periodic(t, spec.motion_amplitude, phase)
            bx = cx + _periodic(t, spec.motion_amplitude, phase + np.pi / 2)
            r2 = (yy - by) ** 2 + (xx - bx) ** 2
            sigma = radius / 2.0
            blob = np.exp(-r2 / (2 * sigma ** 2)) - 0.5 * np.exp(-r2 / (2 * (1.6 * sigma) ** 2))
            blob = 40.0 * (blob - blob.mean())
            image += blob[..., None] * tint[None, None, :]
        elif tri_label == "malignant":
            theta = np.arctan2(yy - cy, xx - cx)
            jitter = phases + rng.normal(0.0, 0.6, size=harmonics.size)
            boundary = radius * (1.0 + np.sum(amplitudes[:, None, None]
                                              * np.sin(harmonics[:, None, None] * theta[None] + jitter[:, None, None]),
                                              axis=0))
            inside = (yy - cy) ** 2 + (xx - cx) ** 2 < boundary ** 2
            sigma = 50.0 * spec.texture_roughness
            texture = np.clip(rng.normal(0.0, sigma, size=(h, w)), -2.5 * sigma, 2.5 * sigma)
            texture = np.where(inside, texture, 0.0)
            if inside.any():
                texture[inside] -= texture[inside].mean()
            image += texture[..., None]
        frames[t] = np.clip(np.rint(image), 0, 255).astype(np.uint8)
    return frames


def _clip_seed(seed, index):
    return np.random.SeedSequence([int(seed), int(index)])


def generate_synthetic(spec: SynthSpec, out_dir, workers: int = 1, progress: bool = False) -> str:
    """
    Write one PPM frame directory per clip plus ``manifest.jsonl`` under ``out_dir``.

    Clips are numbered normal, then benign, then malignant; clip ``i`` draws
    from a generator seeded by (spec.seed, i), so output bytes depend only on
    ``spec`` whatever the worker count. Returns the manifest path.
    """
    if spec.total == 0:
        raise ValidationError("SynthSpec asks for zero clips")
    os.makedirs(out_dir, exist_ok=True)
    if not os.access(out_dir, os.W_OK):
        raise PermissionError(f"Output directory {out_dir} is not writable")

    jobs = []
    for label in TRI_LABELS:
        for _ in range(spec.n_per_class[label]):
            index = len(jobs)
            jobs.append((index, f"clip_{index:04d}", label))

    def write_clip(job):
        index, clip_id, label = job
        frame_dir = os.path.join(out_dir, "clips", clip_id)
        os.makedirs(frame_dir, exist_ok=True)
        frames = render_clip(label, spec, np.random.default_rng(_clip_seed(spec.seed, index)))
        for t, frame in enumerate(frames):
            write_ppm(os.path.join(frame_dir, FRAME_PATTERN.format(t)), frame)
        return ManifestEntry(id=clip_id, frame_dir=frame_dir, frame_count=spec.frames, tri_label=label)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            entries = list(tqdm(pool.map(write_clip, jobs), total=len(jobs), desc="clips", disable=not progress))
    else:
        entries = [write_clip(job) for job in tqdm(jobs, desc="clips", disable=not progress)]

    manifest = write_manifest(entries, os.path.join(out_dir, MANIFEST_NAME))
    logger.info("Generated %d clips (%d malignant) into %s", len(entries),
                spec.n_per_class["malignant"], out_dir)
    return manifest
