"""Face-verification semantics on top of embeddings.

Distances are squared Euclidean between unit-norm embeddings, so they live in
[0, 4] and relate to cosine similarity by d = 2 - 2*cos. A pair is declared
"same" when the distance is strictly below the calibrated threshold.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensorio
from .errors import CalibrationError, ConfigError


@dataclass(frozen=True)
class VerificationThreshold:
    delta: float

    def __post_init__(self):
        if not 0.0 <= self.delta <= 4.0:
            raise ConfigError(f"threshold must lie in [0, 4], got {self.delta}")


@dataclass
class PairRecord:
    """Two image references plus the same-identity label.

    References may be file paths (resolved through tensorio) or in-memory
    arrays; the harness preloads arrays when it can.
    """

    image_a: object
    image_b: object
    same_identity: bool
    pair_id: str = ""

    def resolve(self, which, cache=None):
        ref = self.image_a if which == "a" else self.image_b
        if isinstance(ref, np.ndarray):
            return ref
        if cache is not None:
            if ref not in cache:
                cache[ref] = tensorio.load_image(ref)
            return cache[ref]
        return tensorio.load_image(ref)


@dataclass
class ModelCard:
    name: str
    weights_prefix: str
    input_shape: tuple
    threshold: float | None = None
    accuracy: float | None = None
    extra: dict = field(default_factory=dict)

    def require_threshold(self):
        if self.threshold is None:
            raise ConfigError(f"model {self.name!r} has no calibrated threshold")
        return self.threshold


def feature_distance(model, x_a, x_b):
    """||f(a) - f(b)||^2, clipped into [0, 4] against float round-off."""
    diff = model.forward(x_a) - model.forward(x_b)
    return float(np.clip((diff * diff).sum(), 0.0, 4.0))


def embedding_distance(emb_a, emb_b):
    diff = np.asarray(emb_a) - np.asarray(emb_b)
    return float(np.clip((diff * diff).sum(), 0.0, 4.0))


def verify(model, threshold, x_a, x_b):
    """Return "same" iff the feature distance is strictly below the threshold."""
    delta = threshold.delta if isinstance(threshold, VerificationThreshold) else float(threshold)
    return "same" if feature_distance(model, x_a, x_b) < delta else "different"


def decide(distance, delta):
    return "same" if distance < delta else "different"


def cosine_to_euclidean_threshold(delta_c):
    """Convert a cosine threshold to the squared-Euclidean domain: 2 - 2*c."""
    if not -1.0 <= delta_c <= 1.0:
        raise ConfigError(f"cosine threshold must lie in [-1, 1], got {delta_c}")
    return 2.0 - 2.0 * delta_c


def _pair_distances(model, pairs, cache=None):
    if cache is None:
        cache = {}
    distances = np.empty(len(pairs))
    labels = np.empty(len(pairs), dtype=bool)
    for i, pair in enumerate(pairs):
        distances[i] = feature_distance(
            model, pair.resolve("a", cache), pair.resolve("b", cache)
        )
        labels[i] = pair.same_identity
    return distances, labels


def _accuracy(distances, labels, delta):
    genuine_right = np.count_nonzero(labels & (distances < delta))
    impostor_right = np.count_nonzero(~labels & (distances >= delta))
    return (genuine_right + impostor_right) / len(distances)


def _candidate_deltas(distances):
    uniq = np.unique(distances)
    candidates = [0.0, 4.0]
    candidates.extend((uniq[:-1] + uniq[1:]) / 2.0)
    return sorted(candidates)


def _best_delta(distances, labels):
    best = (None, -1.0)
    for delta in _candidate_deltas(distances):
        acc = _accuracy(distances, labels, delta)
        if acc > best[1]:  # ties keep the smallest delta (candidates are sorted)
            best = (delta, acc)
    return best


def calibrate_threshold(model, pairs, folds=1, cache=None):
    """Pick the distance threshold maximizing verification accuracy.

    Candidates are the midpoints between consecutive sorted distances plus the
    domain endpoints 0 and 4; ties break toward the smallest delta. With
    ``folds`` > 1, accuracy is instead the mean of held-out fold accuracies
    (each fold scored with a threshold calibrated on the remaining folds),
    while the returned delta is still calibrated on the full set.

    Returns ``(VerificationThreshold, accuracy)``.
    """
    if not pairs:
        raise CalibrationError("cannot calibrate on an empty pair set")
    distances, labels = _pair_distances(model, pairs, cache)
    if labels.all() or not labels.any():
        raise CalibrationError("calibration needs at least one genuine and one impostor pair")
    delta, accuracy = _best_delta(distances, labels)
    if folds > 1:
        if folds > len(pairs):
            raise CalibrationError(f"cannot split {len(pairs)} pairs into {folds} folds")
        fold_ids = np.arange(len(pairs)) % folds
        fold_accs = []
        for k in range(folds):
            held = fold_ids == k
            train_d, train_y = distances[~held], labels[~held]
            if train_y.all() or not train_y.any():
                raise CalibrationError("a calibration fold lost one of the classes")
            fold_delta, _ = _best_delta(train_d, train_y)
            fold_accs.append(_accuracy(distances[held], labels[held], fold_delta))
        accuracy = float(np.mean(fold_accs))
    return VerificationThreshold(delta), float(accuracy)
