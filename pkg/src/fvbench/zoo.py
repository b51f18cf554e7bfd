"""Small embedding-model architectures and card management.

Three toy backbones cover the benchmark's needs: a linear probe, a two-block
conv net, and a differently shaped conv net so transfer runs have genuinely
distinct architectures to move between.
"""

import os

import numpy as np

from .errors import ConfigError
from .nn import AvgPool2d, Conv2d, Dense, EmbeddingModel, Flatten, L2Normalize, ReLU
from .seeding import make_rng
from .verification import ModelCard

ARCHS = ("linear", "small", "wide")


def _he(rng, shape, fan_in):
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def build_model(arch, input_shape, seed=0, embed_dim=32, name=None):
    h, w, c = input_shape
    rng = make_rng(seed)
    if arch == "linear":
        flat = h * w * c
        layers = [
            Flatten(),
            Dense(_he(rng, (flat, embed_dim), flat), np.zeros(embed_dim)),
            L2Normalize(),
        ]
    elif arch == "small":
        c1, c2 = 6, 12
        layers = [
            Conv2d(_he(rng, (3, 3, c, c1), 9 * c), np.zeros(c1), stride=1, padding=1),
            ReLU(),
            AvgPool2d(2),
            Conv2d(_he(rng, (3, 3, c1, c2), 9 * c1), np.zeros(c2), stride=1, padding=1),
            ReLU(),
            AvgPool2d(2),
            Flatten(),
            Dense(_he(rng, ((h // 4) * (w // 4) * c2, embed_dim), (h // 4) * (w // 4) * c2),
                  np.zeros(embed_dim)),
            L2Normalize(),
        ]
    elif arch == "wide":
        c1, c2 = 10, 8
        layers = [
            Conv2d(_he(rng, (5, 5, c, c1), 25 * c), np.zeros(c1), stride=1, padding=2),
            ReLU(),
            AvgPool2d(2),
            Conv2d(_he(rng, (3, 3, c1, c2), 9 * c1), np.zeros(c2), stride=1, padding=1),
            ReLU(),
            AvgPool2d(2),
            Flatten(),
            Dense(_he(rng, ((h // 4) * (w // 4) * c2, embed_dim), (h // 4) * (w // 4) * c2),
                  np.zeros(embed_dim)),
            L2Normalize(),
        ]
    else:
        raise ConfigError(f"unknown architecture {arch!r} (choose from {ARCHS})")
    return EmbeddingModel(layers, input_shape, name=name or f"{arch}-{seed}")


def save_card(card, prefix):
    lines = [
        f"name={card.name}",
        "input_shape=" + ",".join(str(d) for d in card.input_shape),
    ]
    if card.threshold is not None:
        lines.append(f"threshold={card.threshold!r}")
    if card.accuracy is not None:
        lines.append(f"accuracy={card.accuracy!r}")
    for key in sorted(card.extra):
        lines.append(f"{key}={card.extra[key]}")
    with open(f"{prefix}.card", "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_card(prefix):
    path = f"{prefix}.card"
    if not os.path.exists(path):
        raise ConfigError(f"no model card at {path}; calibrate the model first")
    fields = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                key, _, value = line.partition("=")
                fields[key] = value
    card = ModelCard(
        name=fields.pop("name"),
        weights_prefix=prefix,
        input_shape=tuple(int(d) for d in fields.pop("input_shape").split(",")),
        threshold=float(fields.pop("threshold")) if "threshold" in fields else None,
        accuracy=float(fields.pop("accuracy")) if "accuracy" in fields else None,
    )
    card.extra = fields
    return card
