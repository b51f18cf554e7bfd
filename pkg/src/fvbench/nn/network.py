"""Embedding network container: forward pass, input/parameter gradients, disk format.

The public pixel domain is [0, 255]; ``pixel_scale`` (default 1/255) is applied
before the first layer so feature extraction happens on [0, 1] activations.
Gradients returned to callers are with respect to the [0, 255] pixels.
"""

import copy

import numpy as np

from ..errors import NumericError, ShapeError
from .layers import LAYER_KINDS, Conv2d, L2Normalize

_DEF_SCALE = 1.0 / 255.0


class EmbeddingModel:
    """Immutable stack of layers ending in l2normalize.

    Construction validates the layer chain by shape inference, so a kernel
    that does not match its input channels fails here, not mid-forward.
    """

    def __init__(self, layers, input_shape, pixel_scale=_DEF_SCALE, name="model"):
        if len(input_shape) != 3:
            raise ShapeError("input_shape must be (h, w, c)")
        norm_layers = [i for i, l in enumerate(layers) if l.kind == "l2normalize"]
        if norm_layers != [len(layers) - 1]:
            raise ShapeError("model must contain exactly one l2normalize, as the last layer")
        shape = tuple(int(d) for d in input_shape)
        self.layer_shapes = [shape]
        for layer in layers:
            shape = layer.out_shape(shape)
            self.layer_shapes.append(shape)
        self.layers = list(layers)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.pixel_scale = float(pixel_scale)
        self.name = name
        self.embed_dim = shape[0]

    def _as_batch(self, image):
        x = np.asarray(image, dtype=np.float64)
        if x.shape == self.input_shape:
            return x[None], True
        if x.ndim == 4 and x.shape[1:] == self.input_shape:
            return x, False
        raise ShapeError(
            f"expected image of shape {self.input_shape} (or a batch of them), got {x.shape}"
        )

    def _forward_cached(self, batch):
        act = batch * self.pixel_scale
        caches = []
        for i, layer in enumerate(self.layers):
            act, cache = layer.forward(act)
            caches.append(cache)
            if not np.isfinite(act).all():
                raise NumericError(
                    f"non-finite values after layer {i} ({layer.kind})", layer_index=i
                )
        return act, caches

    def forward(self, image):
        """Embed one image (h, w, c) or a batch (n, h, w, c)."""
        batch, single = self._as_batch(image)
        emb, _ = self._forward_cached(batch)
        return emb[0] if single else emb

    def _backprop_input(self, caches, grad_emb):
        grad = grad_emb
        for i in range(len(self.layers) - 1, -1, -1):
            grad, _ = self.layers[i].backward(caches[i], grad)
            if not np.isfinite(grad).all():
                raise NumericError(
                    f"non-finite gradient through layer {i} ({self.layers[i].kind})",
                    layer_index=i,
                )
        return grad * self.pixel_scale

    def distance_gradient(self, image, reference):
        """Feature distance to ``reference`` and its gradient at ``image``.

        Returns ``(d, grad)`` with ``d = ||f(x) - reference||^2`` and ``grad``
        in pixel units, same shape as the image.
        """
        reference = np.asarray(reference, dtype=np.float64)
        if reference.shape != (self.embed_dim,):
            raise ShapeError(
                f"reference must have dimension {self.embed_dim}, got {reference.shape}"
            )
        batch, _ = self._as_batch(image)
        emb, caches = self._forward_cached(batch)
        diff = emb - reference
        distance = float((diff * diff).sum())
        grad = self._backprop_input(caches, 2.0 * diff)
        return distance, grad[0]

    def input_gradient(self, image, reference):
        """Gradient of the squared feature distance with respect to the image."""
        return self.distance_gradient(image, reference)[1]

    def parameters(self):
        """Flat list of trainable arrays, in layer order."""
        out = []
        for layer in self.layers:
            out.extend(layer.param_arrays())
        return out

    def clone(self):
        return copy.deepcopy(self)


def parameter_gradients(model, images, labels, loss_fn):
    """Loss and gradients for every trainable tensor of ``model``.

    ``loss_fn(embeddings, labels) -> (loss, grad_embeddings)`` supplies the
    training objective; gradients are returned as a flat list aligned with
    ``model.parameters()``.
    """
    batch, _ = model._as_batch(images)
    emb, caches = model._forward_cached(batch)
    loss, grad = loss_fn(emb, labels)
    if not np.isfinite(loss):
        raise NumericError("loss is non-finite")
    grads = [None] * len(model.layers)
    for i in range(len(model.layers) - 1, -1, -1):
        grad, param_grads = model.layers[i].backward(caches[i], grad)
        grads[i] = param_grads
    flat = []
    for g in grads:
        flat.extend(g)
    return float(loss), flat


# --- disk format ------------------------------------------------------------
#
# <prefix>.manifest : text key=value header plus one "layer.N=..." line per
#                     layer; <prefix>.weights : raw little-endian float32
#                     arrays concatenated in manifest order.

_MAGIC = "fvbench-weights-v1"


def _layer_line(layer):
    entries = " ".join(f"{k}={v}" for k, v in layer.spec_entries().items())
    return f"{layer.kind} {entries}".strip()


def save_model(model, prefix):
    lines = [
        f"format={_MAGIC}",
        f"name={model.name}",
        "input_shape=" + ",".join(str(d) for d in model.input_shape),
        f"pixel_scale={model.pixel_scale!r}",
        f"layers={len(model.layers)}",
    ]
    for i, layer in enumerate(model.layers):
        lines.append(f"layer.{i}={_layer_line(layer)}")
    with open(f"{prefix}.manifest", "w") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(f"{prefix}.weights", "wb") as fh:
        for p in model.parameters():
            fh.write(np.ascontiguousarray(p, dtype="<f4").tobytes())


def _parse_kv(text):
    out = {}
    for tok in text.split():
        k, _, v = tok.partition("=")
        out[k] = v
    return out


def _build_layer(kind, kv, reader):
    if kind == "dense":
        n_in, n_out = int(kv["in"]), int(kv["out"])
        return LAYER_KINDS[kind](reader((n_in, n_out)), reader((n_out,)))
    if kind == "conv2d":
        shape = (int(kv["kh"]), int(kv["kw"]), int(kv["c_in"]), int(kv["c_out"]))
        return Conv2d(
            reader(shape),
            reader((shape[3],)),
            stride=int(kv["stride"]),
            padding=int(kv["padding"]),
        )
    if kind == "avgpool2d":
        return LAYER_KINDS[kind](int(kv["size"]), int(kv["stride"]))
    if kind in ("relu", "flatten", "l2normalize"):
        return LAYER_KINDS[kind]()
    raise ShapeError(f"unknown layer kind {kind!r} in manifest")


def load_model(prefix):
    with open(f"{prefix}.manifest") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    header = {}
    layer_lines = []
    for ln in lines:
        key, _, value = ln.partition("=")
        if key.startswith("layer."):
            layer_lines.append((int(key.split(".", 1)[1]), value))
        else:
            header[key] = value
    if header.get("format") != _MAGIC:
        raise ShapeError(f"unrecognized weight manifest at {prefix}.manifest")
    layer_lines.sort()
    blob = np.fromfile(f"{prefix}.weights", dtype="<f4").astype(np.float64)
    cursor = 0

    def reader(shape):
        nonlocal cursor
        n = int(np.prod(shape))
        if cursor + n > blob.size:
            raise ShapeError("weight blob shorter than manifest demands")
        out = blob[cursor : cursor + n].reshape(shape)
        cursor += n
        return out

    layers = []
    for _, line in layer_lines:
        kind, _, rest = line.partition(" ")
        layers.append(_build_layer(kind, _parse_kv(rest), reader))
    if cursor != blob.size:
        raise ShapeError("weight blob longer than manifest demands")
    input_shape = tuple(int(d) for d in header["input_shape"].split(","))
    return EmbeddingModel(
        layers,
        input_shape,
        pixel_scale=float(header["pixel_scale"]),
        name=header.get("name", "model"),
    )
