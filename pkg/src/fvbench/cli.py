"""Command-line entry points.

Subcommands: gen-synthetic, train, train-at, calibrate, attack,
eval-whitebox, eval-transfer, min-pert, report. Every run takes its
parameters from a JSON config file where one exists, with flags overriding
individual keys; the exit code is 0 only when the whole run succeeded.
"""

import argparse
import json
import sys

import numpy as np

from . import tensorio
from .attacks import ThreatModel, run_attack
from .defenses import ATConfig, ClassifierHead, adversarial_train, save_training_log
from .errors import FvbenchError
from .evaluation import min_perturbation
from .harness import (
    RunConfig,
    attack_from_dict,
    load_pairs,
    regenerate_plotdata,
    run_transfer,
    run_whitebox,
)
from .masks import load_landmarks
from .nn import load_model, save_model
from .seeding import derive_seed, make_rng
from .synthetic import SyntheticDatasetSpec, generate_synthetic
from .verification import ModelCard, calibrate_threshold
from .zoo import build_model, load_card, save_card


def _add_common(parser):
    parser.add_argument("--config", help="JSON run-config file")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--workers", type=int, default=None)
    parser.add_argument("--output", default=None, help="output directory")


def _run_config(args, require=False):
    overrides = {
        "seed": args.seed,
        "workers": args.workers,
        "output_dir": args.output,
    }
    if args.config:
        return RunConfig.from_file(args.config, overrides)
    if require:
        raise FvbenchError("this subcommand needs --config")
    return RunConfig.from_dict({}, overrides)


def _cmd_gen_synthetic(args):
    spec = SyntheticDatasetSpec(
        identities=args.identities,
        samples_per_identity=args.samples,
        image_size=args.size,
        noise_level=args.noise,
        seed=args.seed if args.seed is not None else 0,
        channels=args.channels,
        landmarks_per_identity=args.landmarks,
    )
    dataset = generate_synthetic(spec, args.out)
    print(f"wrote {len(dataset.image_paths)} images under {dataset.root}")


def _load_labeled(data_dir):
    images, labels = [], []
    with open(f"{data_dir}/labels.csv") as fh:
        next(fh)
        for line in fh:
            path, label = line.strip().rsplit(",", 1)
            images.append(tensorio.load_image(path))
            labels.append(int(label))
    return np.stack(images), np.asarray(labels, dtype=np.int64)


def _train_common(args, at_config):
    images, labels = _load_labeled(args.data)
    input_shape = images.shape[1:]
    seed = args.seed if args.seed is not None else 0
    model = build_model(args.arch, input_shape, seed=seed, embed_dim=args.embed_dim,
                        name=args.name)
    n_classes = int(labels.max()) + 1
    head_rng = make_rng(derive_seed(seed, "head"))
    head = ClassifierHead(
        weight=head_rng.standard_normal((n_classes, args.embed_dim)) * 0.1,
        loss_kind=args.loss,
        margin=args.margin,
        scale=args.scale,
    )
    head.renormalize()
    model, head, log = adversarial_train((images, labels), model, head, at_config)
    save_model(model, args.out)
    save_card(
        ModelCard(name=model.name, weights_prefix=args.out, input_shape=model.input_shape),
        args.out,
    )
    save_training_log(f"{args.out}.trainlog.csv", log)
    print(f"trained {model.name}: final accuracy {log[-1]['eval_accuracy']:.3f}")


def _cmd_train(args):
    seed = args.seed if args.seed is not None else 0
    at = ATConfig(
        epsilon=0.0, epochs=args.epochs, batch_size=args.batch_size,
        learning_rate=args.lr, seed=derive_seed(seed, "train"),
    )
    _train_common(args, at)


def _cmd_train_at(args):
    seed = args.seed if args.seed is not None else 0
    at = ATConfig(
        epsilon=args.epsilon, pgd_steps=args.pgd_steps, pgd_alpha=args.pgd_alpha,
        norm=args.at_norm, framework=args.framework, trades_beta=args.trades_beta,
        epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr,
        seed=derive_seed(seed, "train"),
    )
    _train_common(args, at)


def _cmd_calibrate(args):
    model = load_model(args.model)
    pairs = load_pairs(args.pairs)
    threshold, accuracy = calibrate_threshold(model, pairs, folds=args.folds)
    card = ModelCard(
        name=model.name, weights_prefix=args.model, input_shape=model.input_shape,
        threshold=threshold.delta, accuracy=accuracy,
    )
    save_card(card, args.model)
    print(f"{model.name}: threshold {threshold.delta:.6f} accuracy {accuracy:.4f}")


def _cmd_attack(args):
    model = load_model(args.model)
    card = load_card(args.model)
    x = tensorio.load_image(args.image)
    x_ref = tensorio.load_image(args.reference)
    threat = ThreatModel(args.goal, args.norm, args.epsilon)
    config = attack_from_dict({"method": args.method, "steps": args.steps})
    seed = args.seed if args.seed is not None else 0
    config = config.with_seed(seed)
    landmarks = None
    if args.landmarks:
        landmarks = load_landmarks(args.landmarks).get(args.image)
    outcome = run_attack(
        model, card.require_threshold(), x, x_ref, threat, config, landmarks
    )
    tensorio.write_tensor(args.out, outcome.image)
    summary = {
        "success": outcome.success,
        "final_distance": outcome.final_distance,
        "l2_raw": outcome.l2_raw,
        "l2_normalized": outcome.l2_normalized,
        "linf": outcome.linf,
        "steps_used": outcome.steps_used,
        "warnings": list(outcome.warnings),
        "seed": seed,
    }
    print(json.dumps(summary, sort_keys=True))


def _cmd_min_pert(args):
    model = load_model(args.model)
    card = load_card(args.model)
    pairs = load_pairs(args.pairs)
    config = attack_from_dict({"method": args.method, "steps": args.steps})
    landmarks = load_landmarks(args.landmarks) if args.landmarks else {}
    seed = args.seed if args.seed is not None else 0
    rows = []
    for rec in pairs:
        wanted_same = args.goal == "dodging"
        if rec.same_identity != wanted_same:
            continue
        x = rec.resolve("a")
        ref_emb = model.forward(rec.resolve("b"))
        pair_seed = derive_seed(seed, "pair", rec.pair_id)
        result = min_perturbation(
            model, card.require_threshold(), x, ref_emb, args.goal, args.norm,
            config, pair_seed, landmarks=landmarks.get(rec.image_a),
        )
        result.pair_id = rec.pair_id
        rows.append(result)
    with open(args.out, "w") as fh:
        fh.write("pair_id,goal,norm,method,epsilon_star,feasible,seed\n")
        for r in rows:
            fh.write(
                f"{r.pair_id},{r.goal},{r.norm},{r.method},"
                f"{float(r.epsilon_star)!r},{int(r.feasible)},{r.seed}\n"
            )
    print(f"wrote {len(rows)} results to {args.out}")


def _cmd_eval_whitebox(args):
    config = _run_config(args, require=True)
    medians = run_whitebox(config)
    print(f"evaluated {len(medians)} cells into {config.output_dir}")


def _cmd_eval_transfer(args):
    config = _run_config(args, require=True)
    matrices = run_transfer(config)
    print(f"wrote {len(matrices)} transfer matrices into {config.output_dir}")


def _cmd_report(args):
    config = _run_config(args, require=True)
    produced = regenerate_plotdata(config)
    print(f"regenerated {len(produced)} curve files")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="fvbench",
        description="Adversarial robustness evaluation for face verification",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", help="generate a synthetic identity dataset")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--identities", type=int, default=8)
    p.add_argument("--samples", type=int, default=8)
    p.add_argument("--size", type=int, default=24)
    p.add_argument("--noise", type=float, default=8.0)
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--landmarks", type=int, default=8)
    p.set_defaults(func=_cmd_gen_synthetic)

    for name, func in (("train", _cmd_train), ("train-at", _cmd_train_at)):
        p = sub.add_parser(name, help=f"{name} a toy embedding model")
        _add_common(p)
        p.add_argument("--data", required=True, help="dataset dir with labels.csv")
        p.add_argument("--out", required=True, help="model file prefix")
        p.add_argument("--arch", default="small")
        p.add_argument("--name", default=None)
        p.add_argument("--loss", default="softmax")
        p.add_argument("--margin", type=float, default=0.0)
        p.add_argument("--scale", type=float, default=30.0)
        p.add_argument("--embed-dim", type=int, default=32)
        p.add_argument("--epochs", type=int, default=20)
        p.add_argument("--batch-size", type=int, default=32)
        p.add_argument("--lr", type=float, default=3e-3)
        if name == "train-at":
            p.add_argument("--epsilon", type=float, default=8.0)
            p.add_argument("--pgd-steps", type=int, default=9)
            p.add_argument("--pgd-alpha", type=float, default=1.0)
            p.add_argument("--at-norm", default="linf")
            p.add_argument("--framework", default="pgd_at")
            p.add_argument("--trades-beta", type=float, default=6.0)
        p.set_defaults(func=func)

    p = sub.add_parser("calibrate", help="calibrate a verification threshold")
    _add_common(p)
    p.add_argument("--model", required=True, help="model file prefix")
    p.add_argument("--pairs", required=True)
    p.add_argument("--folds", type=int, default=1)
    p.set_defaults(func=_cmd_calibrate)

    p = sub.add_parser("attack", help="attack one image pair")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--method", default="bim")
    p.add_argument("--goal", default="dodging")
    p.add_argument("--norm", default="linf")
    p.add_argument("--epsilon", type=float, default=8.0)
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--landmarks", default=None)
    p.set_defaults(func=_cmd_attack)

    p = sub.add_parser("min-pert", help="minimum-perturbation search over a pair list")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--method", default="bim")
    p.add_argument("--goal", default="dodging")
    p.add_argument("--norm", default="linf")
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--landmarks", default=None)
    p.set_defaults(func=_cmd_min_pert)

    for name, func in (
        ("eval-whitebox", _cmd_eval_whitebox),
        ("eval-transfer", _cmd_eval_transfer),
        ("report", _cmd_report),
    ):
        p = sub.add_parser(name)
        _add_common(p)
        p.set_defaults(func=func)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except FvbenchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
