"""Seeded synthetic identity datasets.

Each identity is a parametric template: a smooth background shared by the
whole dataset plus identity-specific Gaussian blobs ("features") whose
centers double as the landmark points. Samples jitter the template by a
small integer shift and add pixel noise. The signal that separates
identities is concentrated at the feature blobs, which is what makes
landmark-guided occlusion meaningful on this data.

Generation is byte-deterministic for a fixed spec.
"""

import json
import math
import os
from dataclasses import asdict, dataclass

import numpy as np

from . import tensorio
from .errors import ConfigError
from .masks import LandmarkSet, save_landmarks
from .seeding import derive_seed, make_rng


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    identities: int = 8
    samples_per_identity: int = 8
    image_size: int = 24
    noise_level: float = 8.0
    seed: int = 0
    channels: int = 1
    jitter: int = 1
    landmarks_per_identity: int = 8

    def __post_init__(self):
        if self.identities < 2:
            raise ConfigError("need at least 2 identities")
        if self.image_size < 16:
            raise ConfigError("image size must be at least 16")
        if self.samples_per_identity < 1:
            raise ConfigError("need at least one sample per identity")
        if self.channels not in (1, 3):
            raise ConfigError("channels must be 1 or 3")


@dataclass
class SyntheticDataset:
    root: str
    spec: SyntheticDatasetSpec
    image_paths: list
    labels: list
    landmark_path: str
    pairs_path: str
    eval_pairs_path: str

    def load_arrays(self):
        images = np.stack([tensorio.load_image(p) for p in self.image_paths])
        return images, np.asarray(self.labels, dtype=np.int64)


def _background(size, rng):
    yy, xx = np.mgrid[0:size, 0:size] / size
    freq = rng.uniform(0.6, 1.2)
    angle = rng.uniform(0, math.pi)
    phase = rng.uniform(0, 2 * math.pi)
    wave = np.cos(2 * math.pi * freq * (np.cos(angle) * xx + np.sin(angle) * yy) + phase)
    return 120.0 + 35.0 * wave


def _identity_template(size, background, n_blobs, rng):
    margin = max(3, size // 8)
    rows = rng.integers(margin, size - margin, size=n_blobs)
    cols = rng.integers(margin, size - margin, size=n_blobs)
    amps = rng.uniform(55.0, 110.0, size=n_blobs) * rng.choice([-1.0, 1.0], size=n_blobs)
    sigma = max(1.5, size / 12.0)
    yy, xx = np.mgrid[0:size, 0:size]
    img = background.copy()
    for r, c, a in zip(rows, cols, amps):
        img += a * np.exp(-((yy - r) ** 2 + (xx - c) ** 2) / (2 * sigma**2))
    return np.clip(img, 10.0, 245.0), list(zip(rows.tolist(), cols.tolist()))


def _shift(image, dr, dc):
    return np.roll(np.roll(image, dr, axis=0), dc, axis=1)


def generate_synthetic(spec, out_dir):
    """Write a full dataset (images, labels, pairs, landmarks) under ``out_dir``."""
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    size = spec.image_size
    rng = make_rng(derive_seed(spec.seed, "synthetic"))
    background = _background(size, rng)
    image_paths, labels = [], []
    landmark_table = {}
    per_identity_paths = []
    for k in range(spec.identities):
        template, centers = _identity_template(
            size, background, spec.landmarks_per_identity, rng
        )
        lm = LandmarkSet(tuple(centers))
        sample_paths = []
        for s in range(spec.samples_per_identity):
            dr = int(rng.integers(-spec.jitter, spec.jitter + 1)) if spec.jitter else 0
            dc = int(rng.integers(-spec.jitter, spec.jitter + 1)) if spec.jitter else 0
            img = _shift(template, dr, dc)
            img = img + rng.standard_normal((size, size)) * spec.noise_level
            img = np.clip(img, 0.0, 255.0)
            if spec.channels == 3:
                img = np.stack([img] * 3, axis=-1)
            else:
                img = img[:, :, None]
            rel = os.path.join("images", f"id{k:03d}_s{s:02d}.rt")
            path = os.path.join(out_dir, rel)
            tensorio.write_tensor(path, img)
            image_paths.append(path)
            sample_paths.append(path)
            labels.append(k)
            landmark_table[path] = lm.shifted(dr, dc, (size, size))
        per_identity_paths.append(sample_paths)

    pairs_path = os.path.join(out_dir, "pairs.txt")
    eval_pairs_path = os.path.join(out_dir, "pairs_eval.txt")
    _write_pairs(pairs_path, per_identity_paths, rng, offset=0)
    _write_pairs(eval_pairs_path, per_identity_paths, rng, offset=1)

    landmark_path = os.path.join(out_dir, "landmarks.txt")
    save_landmarks(landmark_path, landmark_table)

    with open(os.path.join(out_dir, "labels.csv"), "w") as fh:
        fh.write("path,label\n")
        for path, label in zip(image_paths, labels):
            fh.write(f"{path},{label}\n")
    with open(os.path.join(out_dir, "spec.json"), "w") as fh:
        json.dump(asdict(spec), fh, indent=2, sort_keys=True)
        fh.write("\n")

    return SyntheticDataset(
        root=out_dir,
        spec=spec,
        image_paths=image_paths,
        labels=labels,
        landmark_path=landmark_path,
        pairs_path=pairs_path,
        eval_pairs_path=eval_pairs_path,
    )


def _write_pairs(path, per_identity_paths, rng, offset=0):
    """Balanced genuine/impostor pair protocol over consecutive samples.

    ``offset`` rotates the sample pairing so a second call yields pairs
    disjoint from the first (held-out combinations).
    """
    k = len(per_identity_paths)
    s = len(per_identity_paths[0])
    genuine = []
    for paths in per_identity_paths:
        for j in range(0, s - 1, 2):
            a = paths[(j + offset) % s]
            b = paths[(j + offset + 1) % s]
            genuine.append((a, b))
    impostor = []
    for idx in range(len(genuine)):
        ka = idx % k
        kb = (ka + 1 + int(rng.integers(0, k - 1))) % k
        sa = int(rng.integers(0, s))
        sb = int(rng.integers(0, s))
        impostor.append((per_identity_paths[ka][sa], per_identity_paths[kb][sb]))
    with open(path, "w") as fh:
        for a, b in genuine:
            fh.write(f"{a} {b} 1\n")
        for a, b in impostor:
            fh.write(f"{a} {b} 0\n")
