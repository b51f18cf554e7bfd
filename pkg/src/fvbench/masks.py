"""Landmark ingestion and binary cutout-mask construction.

Masks start as all-ones (h, w) arrays; each placed square zeroes a
``side x side`` region centered on its chosen point, clipped at the image
borders so landmarks near an edge stay valid centers.
"""

from dataclasses import dataclass

from .errors import ConfigError, PairFileError

import numpy as np


@dataclass(frozen=True)
class LandmarkSet:
    """Integer (row, col) points tied to one image."""

    points: tuple

    def __post_init__(self):
        object.__setattr__(self, "points", tuple((int(r), int(c)) for r, c in self.points))

    def __len__(self):
        return len(self.points)

    def validate_bounds(self, shape_hw):
        h, w = shape_hw
        for r, c in self.points:
            if not (0 <= r < h and 0 <= c < w):
                raise ConfigError(f"landmark ({r}, {c}) outside {h}x{w} image")

    def shifted(self, dr, dc, shape_hw):
        h, w = shape_hw
        pts = [
            (min(max(r + dr, 0), h - 1), min(max(c + dc, 0), w - 1))
            for r, c in self.points
        ]
        return LandmarkSet(tuple(pts))


@dataclass(frozen=True)
class MaskConfig:
    """How many squares to cut, how big, and where the centers come from.

    Landmark mode requires an odd (or zero) side so squares center exactly on
    a point; random mode also accepts even sides, which cover the half-open
    range ``[center - side//2, center - side//2 + side)``.
    """

    num_squares: int = 4
    side: int = 7
    mode: str = "landmark"

    def __post_init__(self):
        if self.num_squares < 0 or self.side < 0:
            raise ConfigError("mask num_squares and side must be non-negative")
        if self.mode not in ("landmark", "random"):
            raise ConfigError(f"unknown mask mode {self.mode!r}")
        if self.mode == "landmark" and self.side % 2 == 0 and self.side != 0:
            raise ConfigError("landmark masks need an odd side (squares center on a point)")


def _cut_square(mask, center, side):
    h, w = mask.shape
    r0 = center[0] - side // 2
    c0 = center[1] - side // 2
    mask[max(r0, 0) : min(r0 + side, h), max(c0, 0) : min(c0 + side, w)] = 0.0


def sample_mask(shape_hw, config, landmarks=None, rng=None):
    """Draw one binary cutout mask of shape (h, w).

    Centers are sampled uniformly with replacement from ``landmarks``
    (landmark mode) or uniformly over the image (random mode).
    """
    h, w = int(shape_hw[0]), int(shape_hw[1])
    mask = np.ones((h, w))
    if config.num_squares == 0 or config.side == 0:
        return mask
    if config.mode == "landmark":
        if not landmarks or len(landmarks) == 0:
            raise ConfigError("landmark mask mode requires a non-empty landmark set")
        landmarks.validate_bounds((h, w))
        if rng is None:
            raise ConfigError("sample_mask needs an rng for center sampling")
        idx = rng.integers(0, len(landmarks), size=config.num_squares)
        centers = [landmarks.points[i] for i in idx]
    else:
        if rng is None:
            raise ConfigError("sample_mask needs an rng for center sampling")
        rows = rng.integers(0, h, size=config.num_squares)
        cols = rng.integers(0, w, size=config.num_squares)
        centers = list(zip(rows, cols))
    for center in centers:
        _cut_square(mask, center, config.side)
    return mask


def sample_mask_without_replacement(shape_hw, config, landmarks, rng):
    """Landmark-mode variant drawing distinct center points."""
    if config.num_squares == 0 or config.side == 0:
        return np.ones((int(shape_hw[0]), int(shape_hw[1])))
    if not landmarks or len(landmarks) == 0:
        raise ConfigError("landmark mask mode requires a non-empty landmark set")
    if config.num_squares > len(landmarks):
        raise ConfigError("cannot draw more distinct centers than landmarks")
    landmarks.validate_bounds(shape_hw)
    mask = np.ones((int(shape_hw[0]), int(shape_hw[1])))
    idx = rng.choice(len(landmarks), size=config.num_squares, replace=False)
    for i in idx:
        _cut_square(mask, landmarks.points[i], config.side)
    return mask


def apply_mask(mask, image):
    """Element-wise product, broadcasting the (h, w) mask over channels."""
    image = np.asarray(image)
    if image.ndim == 3:
        if image.shape[:2] != mask.shape:
            raise ConfigError(f"mask {mask.shape} does not fit image {image.shape}")
        return image * mask[:, :, None]
    if image.shape != mask.shape:
        raise ConfigError(f"mask {mask.shape} does not fit image {image.shape}")
    return image * mask


# --- landmark files ----------------------------------------------------------
# one record per image: `<path> <r1,c1> <r2,c2> ...`


def save_landmarks(path, table):
    with open(path, "w") as fh:
        for image_path, lms in table.items():
            pts = " ".join(f"{r},{c}" for r, c in lms.points)
            fh.write(f"{image_path} {pts}\n")


def load_landmarks(path):
    table = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split()
            if len(fields) < 2:
                raise PairFileError(
                    f"{path}:{lineno}: expected `<path> <r,c> ...`", line_number=lineno
                )
            points = []
            for tok in fields[1:]:
                try:
                    r, c = tok.split(",")
                    points.append((int(r), int(c)))
                except ValueError as exc:
                    raise PairFileError(
                        f"{path}:{lineno}: bad landmark token {tok!r}", line_number=lineno
                    ) from exc
            table[fields[0]] = LandmarkSet(tuple(points))
    return table
