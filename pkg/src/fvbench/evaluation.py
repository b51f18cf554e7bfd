"""Benchmark metrics: Asr, minimum-perturbation search, budget curves, transfer.

Measurement units follow the reporting convention: linf budgets are raw pixel
levels, l2 budgets are dimension-normalized (||a||_2 / sqrt(d), i.e. RMS pixel
deviation). Attacks internally take raw l2 radii, so this module converts at
the boundary. Pairs that never fall at the norm ceiling keep a ceiling
sentinel instead of being dropped, which keeps medians well defined.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .attacks import ThreatModel, run_attack_with_reference
from .errors import ConfigError
from .seeding import derive_seed

CEILINGS = {"linf": 255.0, "l2": 255.0}
GRID_UNITS = {"linf": 1.0, "l2": 0.25}


@dataclass
class MinPerturbationResult:
    pair_id: str
    goal: str
    norm: str
    method: str
    epsilon_star: float
    feasible: bool
    seed: int
    bracket: tuple = (0.0, 0.0)
    probes: tuple = ()  # every (epsilon, success) the search observed
    non_monotone: bool = False


@dataclass
class RobustnessCurve:
    points: list  # sorted (epsilon, asr)
    norm: str
    goal: str

    def validate(self):
        last_eps, last_asr = -math.inf, 0.0
        for eps, asr_value in self.points:
            if eps < last_eps or asr_value < last_asr:
                raise ConfigError("robustness curve must be non-decreasing")
            if not 0.0 <= asr_value <= 1.0:
                raise ConfigError("curve asr values must lie in [0, 1]")
            last_eps, last_asr = eps, asr_value
        return self


@dataclass
class TransferMatrix:
    model_names: list
    values: np.ndarray  # (source, target) -> asr

    def entry(self, source, target):
        i = self.model_names.index(source)
        j = self.model_names.index(target)
        return float(self.values[i, j])


def normalized_l2(perturbation, d=None):
    """||a||_2 / sqrt(d); d defaults to the element count of the vector."""
    a = np.asarray(perturbation, dtype=np.float64).ravel()
    if d is None:
        d = a.size
    if d <= 0:
        raise ConfigError("normalized l2 needs a positive dimension")
    return float(np.linalg.norm(a)) / math.sqrt(d)


def asr(model, delta_thr, items):
    """Fraction of pairs whose verification outcome flips on ``model``.

    ``items`` is a list of (adversarial_image, reference_image, same_identity);
    distances are recomputed here, so the same adversarial images can be scored
    against any target model (that is what makes transfer evaluation work).
    """
    if not items:
        raise ConfigError("asr needs at least one pair")
    flips = 0
    for adv, ref, same in items:
        ref_emb = model.forward(ref)
        diff = model.forward(adv) - ref_emb
        distance = float((diff * diff).sum())
        verified_same = distance < delta_thr
        if verified_same != bool(same):
            flips += 1
    return flips / len(items)


def _to_raw(epsilon, norm, d):
    return epsilon if norm == "linf" else epsilon * math.sqrt(d)


def natural_distance(model, x, ref_emb):
    diff = model.forward(x) - ref_emb
    return float(np.clip((diff * diff).sum(), 0.0, 4.0))


def search_grid(unit, ceiling):
    grid = [unit / 4.0, unit / 2.0]
    point = unit
    while point < ceiling:
        grid.append(point)
        point *= 2.0
    grid.append(ceiling)
    return grid


def min_perturbation(model, delta_thr, x, ref_emb, goal, norm, config, seed,
                     landmarks=None, grid_unit=None, ceiling=None):
    """Smallest budget (in reporting units) at which the attack flips the pair.

    Doubling linear search finds the first success, then 10 bisection steps
    shrink the bracket; the attack is re-run at every probe with the same
    pair-derived seed, so stochastic methods are pinned. The returned
    epsilon_star is the bracket's verified-success endpoint. Success is not
    necessarily monotone in the budget for fixed-step iterative attacks; any
    observed inversion is reported via ``non_monotone`` rather than hidden.
    """
    x = np.asarray(x, dtype=np.float64)
    d = x.size
    unit = GRID_UNITS[norm] if grid_unit is None else grid_unit
    ceil = CEILINGS[norm] if ceiling is None else ceiling
    probes = []

    def attempt(eps):
        threat = ThreatModel(goal, norm, _to_raw(eps, norm, d))
        out = run_attack_with_reference(
            model, delta_thr, x, ref_emb, threat, config.with_seed(seed), landmarks
        )
        probes.append((eps, out.success))
        return out.success

    pair_id = ""
    natural = natural_distance(model, x, ref_emb)
    naturally_flipped = (natural >= delta_thr) if goal == "dodging" else (natural < delta_thr)
    if naturally_flipped:
        # a zero budget is the identity attack, which already succeeds
        probes.append((0.0, True))
        return MinPerturbationResult(
            pair_id, goal, norm, config.method, 0.0, True, seed,
            bracket=(0.0, 0.0), probes=tuple(probes),
        )

    lo, hi = 0.0, None
    for eps in search_grid(unit, ceil):
        if attempt(eps):
            hi = eps
            break
        lo = eps
    if hi is None:
        return MinPerturbationResult(
            pair_id, goal, norm, config.method, ceil, False, seed,
            bracket=(lo, ceil), probes=tuple(probes),
            non_monotone=_has_inversion(probes),
        )
    for _ in range(10):
        mid = (lo + hi) / 2.0
        if attempt(mid):
            hi = mid
        else:
            lo = mid
    return MinPerturbationResult(
        pair_id, goal, norm, config.method, hi, True, seed,
        bracket=(lo, hi), probes=tuple(probes),
        non_monotone=_has_inversion(probes),
    )


def _has_inversion(probes):
    successes = [e for e, ok in probes if ok]
    failures = [e for e, ok in probes if not ok]
    if not successes or not failures:
        return False
    return max(failures) > min(successes)


def curve(results, norm=None, goal=None):
    """Asr as a function of budget: asr(eps) = |{i : eps*_i <= eps}| / N.

    Only feasible pairs contribute jump points, so the endpoint at the norm
    ceiling equals the feasible fraction.
    """
    if not results:
        raise ConfigError("cannot build a curve from zero results")
    n = len(results)
    norm = norm or results[0].norm
    goal = goal or results[0].goal
    feasible = sorted(r.epsilon_star for r in results if r.feasible)
    points = []
    for i, eps in enumerate(feasible):
        if points and points[-1][0] == eps:
            points[-1] = (eps, (i + 1) / n)
        else:
            points.append((eps, (i + 1) / n))
    return RobustnessCurve(points=points, norm=norm, goal=goal).validate()


def median_min_perturbation(results):
    """Median epsilon_star; infeasible pairs already carry the ceiling sentinel."""
    if not results:
        raise ConfigError("median needs at least one result")
    return float(np.median([r.epsilon_star for r in results]))


def transfer_matrix(entries, pairs, threat, config, run_seed, landmarks_table=None,
                    pool_map=map):
    """Asr of every target model on examples crafted against every source.

    ``entries`` is a list of (name, model, delta); ``pairs`` yield
    (pair_id, x, x_ref, same_identity) with in-memory arrays. The per-pair
    attack seed depends only on (run_seed, pair_id), so the diagonal is
    bit-identical to an independent white-box run under the same run seed.
    """
    if len(entries) < 1:
        raise ConfigError("transfer evaluation needs at least one model")
    shapes = {tuple(model.input_shape) for _, model, _ in entries}
    if len(shapes) != 1:
        raise ConfigError("transfer evaluation requires a shared input shape")
    names = [name for name, _, _ in entries]
    n = len(entries)
    pairs = list(pairs)
    # reference embeddings per (pair, target model), computed once
    ref_embs = [
        [model.forward(ref) for _, model, _ in entries]
        for (_, _, ref, _) in pairs
    ]

    def craft(task):
        i, p = task
        pair_id, x, x_ref, _ = pairs[p]
        _, source_model, source_delta = entries[i]
        seed = derive_seed(run_seed, "pair", pair_id)
        landmarks = None
        if landmarks_table is not None:
            landmarks = landmarks_table.get(pair_id)
        out = run_attack_with_reference(
            source_model, source_delta, x, ref_embs[p][i],
            threat, config.with_seed(seed), landmarks,
        )
        return out.image

    tasks = [(i, p) for i in range(n) for p in range(len(pairs))]
    flips = np.zeros((n, n))
    for (i, p), adv in zip(tasks, pool_map(craft, tasks)):
        same = pairs[p][3]
        for j, (_, target_model, target_delta) in enumerate(entries):
            diff = target_model.forward(adv) - ref_embs[p][j]
            verified_same = float((diff * diff).sum()) < target_delta
            if verified_same != bool(same):
                flips[i, j] += 1
    return TransferMatrix(model_names=names, values=flips / len(pairs))
