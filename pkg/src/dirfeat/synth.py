"""Deterministic synthetic re-identification dataset.

Each identity gets a procedurally generated square pattern (background
color, stripe texture and a few colored shapes, all drawn from a
per-identity RNG stream); each image of that identity is a mildly
perturbed view: optional mirror, small rotation, brightness scaling, a
camera-specific tint and pixel noise.  Camera ids alternate per image, so
every identity appears under at least two cameras.  Patterns are distinct
enough that a nearest-centroid classifier on raw pixels clears 50%
accuracy, which tests pin as the generator's sanity floor.
"""

from __future__ import annotations

import colorsys

import numpy as np

from . import imageops
from .evaluate import Record

# warm / cool tints, one per synthetic camera (cycled if more are asked)
_CAMERA_TINT = np.array([[0.04, 0.0, -0.03], [-0.03, 0.0, 0.04], [0.0, 0.04, 0.0]])


def _identity_pattern(rng, size: int) -> np.ndarray:
    """One identity's base image: background + stripes + three shapes."""
    hue = rng.uniform()
    bg = colorsys.hsv_to_rgb(hue, rng.uniform(0.3, 0.6), rng.uniform(0.35, 0.65))
    img = np.ones((size, size, 3)) * np.asarray(bg)

    ys, xs = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
    angle = rng.uniform(0, np.pi)
    freq = rng.uniform(2.0, 5.0)
    phase = rng.uniform(0, 2 * np.pi)
    stripes = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (np.cos(angle) * xs + np.sin(angle) * ys) + phase)
    stripe_color = np.asarray(colorsys.hsv_to_rgb((hue + 0.33) % 1.0, 0.7, 0.85))
    img = 0.75 * img + 0.25 * stripes[..., None] * stripe_color

    for _ in range(2):  # rectangles
        cy, cx = rng.uniform(0.15, 0.85, size=2)
        hh, hw = rng.uniform(0.08, 0.22, size=2)
        color = colorsys.hsv_to_rgb(rng.uniform(), 0.85, rng.uniform(0.6, 1.0))
        box = (np.abs(ys - cy) < hh) & (np.abs(xs - cx) < hw)
        img[box] = color
    cy, cx = rng.uniform(0.2, 0.8, size=2)  # one disc
    r = rng.uniform(0.08, 0.18)
    color = colorsys.hsv_to_rgb(rng.uniform(), 0.9, 0.9)
    disc = (ys - cy) ** 2 + (xs - cx) ** 2 < r**2
    img[disc] = color
    return np.clip(img, 0.0, 1.0)


def _perturb(base: np.ndarray, rng, camera: int) -> np.ndarray:
    """One viewpoint-like variation of an identity pattern."""
    img = base
    if rng.random() < 0.5:
        img = imageops.mirror(img)
    img = imageops.rotate(img, rng.uniform(-4.0, 4.0))
    img = img * rng.uniform(0.85, 1.15)
    img = img + _CAMERA_TINT[camera % len(_CAMERA_TINT)]
    img = img + rng.normal(0.0, 0.015, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _roles(n_images: int):
    """Deterministic role split per identity: train, then gallery, then query."""
    n_query = max(1, round(0.2 * n_images)) if n_images >= 3 else 0
    n_gallery = max(1, round(0.2 * n_images)) if n_images >= 2 else 0
    n_train = n_images - n_query - n_gallery
    return ["train"] * n_train + ["gallery"] * n_gallery + ["query"] * n_query


def generate(n_ids: int, imgs_per_id: int, size: int, seed: int, n_cameras: int = 2):
    """Build the dataset in memory; returns (records, images dict by sample_id).

    Images are (size, size, 3) float64 in [0, 1].  The same seed always
    yields the same records and pixel values.
    """
    if n_ids < 2:
        raise ValueError("need at least 2 identities")
    if imgs_per_id < 1 or size < 8:
        raise ValueError("need imgs_per_id >= 1 and size >= 8")
    records, images = [], {}
    roles = _roles(imgs_per_id)
    id_seeds = np.random.SeedSequence(seed).spawn(n_ids)
    for i in range(n_ids):
        streams = id_seeds[i].spawn(imgs_per_id + 1)
        base = _identity_pattern(np.random.default_rng(streams[0]), size)
        vid = f"v{i:03d}"
        for j in range(imgs_per_id):
            cam = j % n_cameras
            img = _perturb(base, np.random.default_rng(streams[j + 1]), cam)
            sid = f"{vid}_i{j:02d}"
            records.append(
                Record(
                    sample_id=sid,
                    image_path=f"{sid}.png",
                    vehicle_id=vid,
                    camera_id=f"c{cam}",
                    role=roles[j],
                )
            )
            images[sid] = img
    return records, images


def nearest_centroid_accuracy(records, images) -> float:
    """Sanity floor: classify every image against per-identity pixel centroids."""
    by_vid = {}
    for r in records:
        by_vid.setdefault(r.vehicle_id, []).append(images[r.sample_id].ravel())
    vids = sorted(by_vid)
    centroids = np.stack([np.mean(by_vid[v], axis=0) for v in vids])
    correct = 0
    for r in records:
        d = ((centroids - images[r.sample_id].ravel()) ** 2).sum(axis=1)
        correct += vids[int(np.argmin(d))] == r.vehicle_id
    return correct / len(records)
