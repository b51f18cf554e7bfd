"""Run orchestration: config files, pipelines, and report emission.

Every emitted file starts with a ``# seed=... config=...`` comment so a run
can be traced back to its exact configuration; replaying the same config and
seed reproduces every byte. Worker counts only change wall-clock time: tasks
are mapped in a fixed order and gathered by index before anything is written.
"""

import hashlib
import json
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import tensorio
from .attacks import AttackConfig, ThreatModel, run_attack_with_reference
from .defenses import DefendedModel, DefenseSpec
from .errors import ConfigError, PairFileError
from .evaluation import (
    CEILINGS,
    curve,
    median_min_perturbation,
    min_perturbation,
    natural_distance,
    transfer_matrix,
)
from .masks import MaskConfig, load_landmarks
from .nn import load_model
from .seeding import derive_seed
from .verification import PairRecord
from .zoo import load_card

TRANSFER_DEFAULT_EPSILON = {"linf": 8.0, "l2": 4.0}
TRANSFER_DEFAULT_STEPS = 100


def config_hash(raw):
    blob = json.dumps(raw, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


@dataclass
class RunConfig:
    raw: dict
    seed: int = 0
    workers: int = 1
    output_dir: str = "fvbench-out"
    models: list = field(default_factory=list)  # [{"name", "prefix"}]
    pairs: str = ""
    landmarks: str | None = None
    attacks: list = field(default_factory=list)  # raw attack dicts
    goals: tuple = ("dodging", "impersonation")
    norms: tuple = ("l2", "linf")
    transfer_epsilon: dict = field(default_factory=dict)
    transfer_steps: int | None = None
    defenses: list = field(default_factory=list)

    @property
    def hash(self):
        return config_hash(self.raw)

    @classmethod
    def from_dict(cls, raw, overrides=None):
        data = dict(raw)
        if overrides:
            data.update({k: v for k, v in overrides.items() if v is not None})
        cfg = cls(
            raw=data,
            seed=int(data.get("seed", 0)),
            workers=int(data.get("workers", 1)),
            output_dir=data.get(
                "output_dir", os.environ.get("FVBENCH_OUT", "fvbench-out")
            ),
            models=list(data.get("models", [])),
            pairs=data.get("pairs", ""),
            landmarks=data.get("landmarks"),
            attacks=list(data.get("attacks", [])),
            goals=tuple(data.get("goals", ("dodging", "impersonation"))),
            norms=tuple(data.get("norms", ("l2", "linf"))),
            transfer_epsilon=dict(data.get("transfer_epsilon", {})),
            transfer_steps=data.get("transfer_steps"),
            defenses=list(data.get("defenses", [])),
        )
        return cfg

    @classmethod
    def from_file(cls, path, overrides=None):
        with open(path) as fh:
            return cls.from_dict(json.load(fh), overrides)

    def validate_paths(self):
        if self.pairs and not os.path.exists(self.pairs):
            raise ConfigError(f"pair list {self.pairs!r} does not exist")
        if self.landmarks and not os.path.exists(self.landmarks):
            raise ConfigError(f"landmark file {self.landmarks!r} does not exist")
        for entry in self.models:
            prefix = entry["prefix"]
            for suffix in (".manifest", ".weights"):
                if not os.path.exists(prefix + suffix):
                    raise ConfigError(f"model file {prefix + suffix!r} does not exist")


def attack_from_dict(raw, default_steps=20):
    """Materialize an AttackConfig from a run-config entry."""
    data = dict(raw)
    mask = data.pop("mask", None)
    if mask is not None:
        mask = MaskConfig(**mask)
    kernel = data.pop("tim_kernel", None)
    if kernel is not None:
        kernel = np.asarray(kernel, dtype=np.float64)
    data.setdefault("steps", default_steps)
    if "scale_range" in data:
        data["scale_range"] = tuple(data["scale_range"])
    return AttackConfig(mask=mask, tim_kernel=kernel, **data)


def load_pairs(path):
    """Parse a pair-list file: one `<path_a> <path_b> <0|1>` record per line."""
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split()
            if len(fields) != 3:
                raise PairFileError(
                    f"{path}:{lineno}: expected 3 fields, got {len(fields)}",
                    line_number=lineno,
                )
            if fields[2] not in ("0", "1"):
                raise PairFileError(
                    f"{path}:{lineno}: label must be 0 or 1, got {fields[2]!r}",
                    line_number=lineno,
                )
            records.append(
                PairRecord(
                    image_a=fields[0],
                    image_b=fields[1],
                    same_identity=fields[2] == "1",
                    pair_id=f"p{len(records):04d}",
                )
            )
    if not records:
        warnings.warn(f"pair list {path} is empty")
    return records


def _pool_map(fn, tasks, workers):
    if workers <= 1:
        return [fn(t) for t in tasks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks))


class _LoadedModel:
    def __init__(self, name, model, delta):
        self.name = name
        self.model = model
        self.delta = delta


def load_run_models(config):
    """Load models + calibrated cards, applying any configured defense wrap."""
    defense_by_model = {d["model"]: d for d in config.defenses}
    loaded = []
    for entry in config.models:
        prefix = entry["prefix"]
        model = load_model(prefix)
        card = load_card(prefix)
        delta = card.require_threshold()
        name = entry.get("name", card.name)
        model.name = name
        spec = defense_by_model.get(name)
        if spec is not None:
            spec = dict(spec)
            spec.pop("model")
            aware = spec.pop("white_box_aware", False)
            model = DefendedModel(model, DefenseSpec(**spec), white_box_aware=aware)
            model.name = name
        loaded.append(_LoadedModel(name, model, delta))
    if not loaded:
        raise ConfigError("run config lists no models")
    return loaded


def _load_pair_arrays(config):
    records = load_pairs(config.pairs)
    cache = {}
    out = []
    for rec in records:
        out.append(
            (
                rec.pair_id,
                rec.resolve("a", cache),
                rec.resolve("b", cache),
                rec.same_identity,
            )
        )
    return out


def _landmark_lookup(config, records):
    if not config.landmarks:
        return {}
    table = load_landmarks(config.landmarks)
    lookup = {}
    for rec, (pair_id, _, _, _) in zip(load_pairs(config.pairs), records):
        if rec.image_a in table:
            lookup[pair_id] = table[rec.image_a]
    return lookup


def _header(config):
    return f"# seed={config.seed} config={config.hash}\n"


def _write_csv(path, config, header_row, rows):
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "w") as fh:
        fh.write(_header(config))
        fh.write(header_row + "\n")
        for row in rows:
            fh.write(row + "\n")


def _fmt(x):
    return repr(float(x))


def run_whitebox(config):
    """Per-model x attack x goal x norm minimum-perturbation sweep.

    Emits one raw-results CSV and one curve CSV per cell, plus a wide medians
    table in the dodge/impersonate column-pair layout. Returns the medians
    mapping keyed by (model, method, goal, norm).
    """
    config.validate_paths()
    models = load_run_models(config)
    pairs = _load_pair_arrays(config)
    landmarks = _landmark_lookup(config, pairs)
    out_dir = config.output_dir
    results_dir = os.path.join(out_dir, "results")
    plot_dir = os.path.join(out_dir, "plotdata")
    medians = {}
    for loaded in models:
        ref_cache = {
            pair_id: loaded.model.forward(ref) for pair_id, _, ref, _ in pairs
        }
        for raw_attack in config.attacks:
            attack = attack_from_dict(raw_attack)
            for goal in config.goals:
                wanted_same = goal == "dodging"
                selected = [p for p in pairs if p[3] == wanted_same]
                if not selected:
                    continue
                for norm in config.norms:
                    if attack.method == "cw" and norm != "l2":
                        continue
                    results = _whitebox_cell(
                        config, loaded, attack, goal, norm, selected,
                        ref_cache, landmarks,
                    )
                    key = (loaded.name, attack.method, goal, norm)
                    medians[key] = median_min_perturbation(results)
                    stem = f"{loaded.name}_{attack.method}_{goal}_{norm}"
                    _write_csv(
                        os.path.join(results_dir, f"minpert_{stem}.csv"),
                        config,
                        "pair_id,goal,norm,method,epsilon_star,feasible,seed",
                        [
                            f"{r.pair_id},{r.goal},{r.norm},{r.method},"
                            f"{_fmt(r.epsilon_star)},{int(r.feasible)},{r.seed}"
                            for r in results
                        ],
                    )
                    cell_curve = curve(results, norm=norm, goal=goal).validate()
                    _write_csv(
                        os.path.join(plot_dir, f"curve_{stem}.csv"),
                        config,
                        "epsilon,asr",
                        [f"{_fmt(e)},{_fmt(a)}" for e, a in cell_curve.points],
                    )
    _write_medians_table(config, models, medians)
    return medians


def _whitebox_cell(config, loaded, attack, goal, norm, selected, ref_cache, landmarks):
    def one(task):
        pair_id, x, _, _ = task
        seed = derive_seed(config.seed, "pair", pair_id)
        ref_emb = ref_cache[pair_id]
        if attack.method == "cw":
            threat = ThreatModel(goal, "l2", 0.0)
            out = run_attack_with_reference(
                loaded.model, loaded.delta, x, ref_emb, threat,
                attack.with_seed(seed), landmarks.get(pair_id),
            )
            from .evaluation import MinPerturbationResult

            eps = out.l2_normalized if out.success else CEILINGS["l2"]
            return MinPerturbationResult(
                pair_id, goal, norm, "cw", eps, out.success, seed,
                bracket=(eps, eps), probes=((eps, out.success),),
            )
        result = min_perturbation(
            loaded.model, loaded.delta, x, ref_emb, goal, norm,
            attack, seed, landmarks=landmarks.get(pair_id),
        )
        result.pair_id = pair_id
        return result

    return _pool_map(one, selected, config.workers)


def _write_medians_table(config, models, medians):
    methods = []
    for raw_attack in config.attacks:
        m = raw_attack.get("method", "bim")
        if m not in methods:
            methods.append(m)
    columns = []
    for norm in config.norms:
        for method in methods:
            if method == "cw" and norm != "l2":
                continue
            for goal in config.goals:
                columns.append((norm, method, goal))
    header = "model," + ",".join(
        f"{norm}_{method}_{'dod' if goal == 'dodging' else 'imp'}"
        for norm, method, goal in columns
    )
    rows = []
    for loaded in models:
        cells = []
        for norm, method, goal in columns:
            value = medians.get((loaded.name, method, goal, norm))
            cells.append("" if value is None else _fmt(value))
        rows.append(loaded.name + "," + ",".join(cells))
    _write_csv(
        os.path.join(config.output_dir, "results", "medians.csv"),
        config,
        header,
        rows,
    )


def run_transfer(config):
    """One source x target Asr matrix per attack method at a fixed budget."""
    config.validate_paths()
    models = load_run_models(config)
    if len(models) < 2:
        raise ConfigError("transfer evaluation needs at least two models")
    pairs = _load_pair_arrays(config)
    landmarks = _landmark_lookup(config, pairs)
    entries = [(m.name, m.model, m.delta) for m in models]
    out = {}
    for raw_attack in config.attacks:
        attack = attack_from_dict(
            raw_attack, default_steps=config.transfer_steps or TRANSFER_DEFAULT_STEPS
        )
        for goal in config.goals:
            wanted_same = goal == "dodging"
            selected = [p for p in pairs if p[3] == wanted_same]
            if not selected:
                continue
            for norm in config.norms:
                if attack.method == "cw" and norm != "l2":
                    continue
                epsilon = config.transfer_epsilon.get(
                    norm, TRANSFER_DEFAULT_EPSILON[norm]
                )
                eps_raw = epsilon
                if norm == "l2":
                    d = selected[0][1].size
                    eps_raw = epsilon * float(np.sqrt(d))
                threat = ThreatModel(goal, norm, eps_raw)
                matrix = transfer_matrix(
                    entries, selected, threat, attack, config.seed,
                    landmarks_table=landmarks,
                    pool_map=lambda fn, tasks: _pool_map(fn, tasks, config.workers),
                )
                stem = f"{attack.method}_{goal}_{norm}"
                rows = [
                    name + "," + ",".join(_fmt(v) for v in matrix.values[i])
                    for i, name in enumerate(matrix.model_names)
                ]
                header = "source\\target," + ",".join(matrix.model_names)
                _write_csv(
                    os.path.join(config.output_dir, "results", f"matrix_{stem}.csv"),
                    config, header, rows,
                )
                _write_csv(
                    os.path.join(config.output_dir, "plotdata", f"heatmap_{stem}.csv"),
                    config, header, rows,
                )
                out[(attack.method, goal, norm)] = matrix
    return out


def regenerate_plotdata(config):
    """Rebuild plotdata curves from previously written min-perturbation CSVs."""
    results_dir = os.path.join(config.output_dir, "results")
    if not os.path.isdir(results_dir):
        raise ConfigError(f"no results directory under {config.output_dir!r}")
    from .evaluation import MinPerturbationResult

    produced = []
    for fname in sorted(os.listdir(results_dir)):
        if not (fname.startswith("minpert_") and fname.endswith(".csv")):
            continue
        results = []
        with open(os.path.join(results_dir, fname)) as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#") or line.startswith("pair_id"):
                    continue
                pid, goal, norm, method, eps, feas, seed = line.split(",")
                results.append(
                    MinPerturbationResult(
                        pid, goal, norm, method, float(eps), feas == "1", int(seed)
                    )
                )
        if not results:
            continue
        stem = fname[len("minpert_") : -len(".csv")]
        cell_curve = curve(results).validate()
        _write_csv(
            os.path.join(config.output_dir, "plotdata", f"curve_{stem}.csv"),
            config,
            "epsilon,asr",
            [f"{_fmt(e)},{_fmt(a)}" for e, a in cell_curve.points],
        )
        produced.append(stem)
    return produced
