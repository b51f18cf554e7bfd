"""Input-transformation defenses, classification-head losses, adversarial training.

Transforms map [0, 255] images to [0, 255] images of the same shape and are
deterministic (given the spec seed, for the randomized one). Training covers
the direct min-max framework and the natural-loss-plus-robust-divergence
variant, with four interchangeable head losses.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError
from .nn.network import parameter_gradients
from .nn.optim import Adam
from .seeding import make_rng

# --- input transforms ---------------------------------------------------------


@dataclass(frozen=True)
class DefenseSpec:
    kind: str = "none"  # none | jpeg | bit_reduce | resize_pad
    quality: int = 75
    bits: int = 3
    scale_range: tuple = (0.85, 1.0)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("none", "jpeg", "bit_reduce", "resize_pad"):
            raise ConfigError(f"unknown defense kind {self.kind!r}")
        if not 1 <= self.quality <= 100:
            raise ConfigError("jpeg quality must lie in [1, 100]")
        if not 1 <= self.bits <= 8:
            raise ConfigError("bit depth must lie in [1, 8]")
        lo, hi = self.scale_range
        if not (0.0 < lo <= hi <= 1.0):
            raise ConfigError("resize scale range must sit within (0, 1]")


def bit_depth_reduce(image, bits):
    """Quantize each pixel to 2^bits levels spread over [0, 255].

    Levels include both endpoints (step 255/(2^bits - 1)) and pixels snap to
    the nearest level, which makes the transform idempotent and an exact
    identity for integer-valued pixels at bits=8.
    """
    if not 1 <= bits <= 8:
        raise ConfigError("bit depth must lie in [1, 8]")
    step = 255.0 / (2**bits - 1)
    return np.round(np.asarray(image, dtype=np.float64) / step) * step


# 8x8 orthonormal DCT-II matrix and the standard luminance quantization table.
_DCT8 = np.array(
    [
        [math.sqrt((1.0 if u == 0 else 2.0) / 8.0) * math.cos((2 * x + 1) * u * math.pi / 16.0)
         for x in range(8)]
        for u in range(8)
    ]
)
_JPEG_LUMA = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)


def _quant_table(quality):
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    return np.clip(np.floor((_JPEG_LUMA * scale + 50.0) / 100.0), 1.0, 255.0)


def jpeg_roundtrip(image, quality):
    """Simplified JPEG: per-channel 8x8 block DCT, quantize, dequantize, inverse.

    No entropy coding or chroma subsampling; the defensive effect is the
    coefficient quantization, which this keeps. Edges are replicated out to a
    multiple of 8 and cropped back.
    """
    if not 1 <= quality <= 100:
        raise ConfigError("jpeg quality must lie in [1, 100]")
    img = np.asarray(image, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[:, :, None]
    h, w, c = img.shape
    ph, pw = (-h) % 8, (-w) % 8
    padded = np.pad(img, ((0, ph), (0, pw), (0, 0)), mode="edge")
    table = _quant_table(quality)
    out = np.empty_like(padded)
    hb, wb = padded.shape[0] // 8, padded.shape[1] // 8
    for ch in range(c):
        blocks = padded[:, :, ch].reshape(hb, 8, wb, 8).transpose(0, 2, 1, 3)
        blocks = blocks.reshape(-1, 8, 8) - 128.0
        coefs = np.einsum("ux,nxy,vy->nuv", _DCT8, blocks, _DCT8)
        coefs = np.round(coefs / table) * table
        rec = np.einsum("xu,nuv,yv->nxy", _DCT8, coefs, _DCT8) + 128.0
        out[:, :, ch] = (
            rec.reshape(hb, wb, 8, 8).transpose(0, 2, 1, 3).reshape(hb * 8, wb * 8)
        )
    out = np.clip(out[:h, :w, :], 0.0, 255.0)
    return out[:, :, 0] if squeeze else out


def _resize_pad_maps(shape_hw, scale_range, rng):
    """Index maps for one random downscale-then-pad draw."""
    h, w = shape_hw
    lo, hi = scale_range
    scale = float(rng.uniform(lo, hi))
    rh = max(1, int(round(h * scale)))
    rw = max(1, int(round(w * scale)))
    src_rows = (np.arange(rh) * h) // rh
    src_cols = (np.arange(rw) * w) // rw
    top = int(rng.integers(0, h - rh + 1))
    left = int(rng.integers(0, w - rw + 1))
    return src_rows, src_cols, top, left


def resize_pad_apply(image, maps):
    src_rows, src_cols, top, left = maps
    out = np.zeros_like(image)
    resized = image[src_rows][:, src_cols]
    out[top : top + len(src_rows), left : left + len(src_cols)] = resized
    return out[: image.shape[0], : image.shape[1]]


def resize_pad_backward(grad_out, maps, in_shape):
    """Route gradients back through the nearest-neighbor gather."""
    src_rows, src_cols, top, left = maps
    grad_in = np.zeros(in_shape)
    patch = grad_out[top : top + len(src_rows), left : left + len(src_cols)]
    # downscaling guarantees unique source indices, so a fancy-index add is safe
    grad_in[src_rows[:, None], src_cols[None, :]] += patch
    return grad_in


def random_resize_pad(image, spec):
    """Seeded random downscale (nearest-neighbor) and zero-pad back to size."""
    rng = make_rng(spec.seed)
    maps = _resize_pad_maps(image.shape[:2], spec.scale_range, rng)
    return resize_pad_apply(np.asarray(image, dtype=np.float64), maps)


def apply_defense(image, spec):
    if spec.kind == "none":
        return np.asarray(image, dtype=np.float64)
    if spec.kind == "jpeg":
        return jpeg_roundtrip(image, spec.quality)
    if spec.kind == "bit_reduce":
        return bit_depth_reduce(image, spec.bits)
    return random_resize_pad(image, spec)


class DefendedModel:
    """Model wrapper placing an input transform inside the model boundary.

    Verification always sees the transformed input. The attacker's gradient
    path sees it only in white-box-aware mode (straight-through for the
    quantizing transforms, exact index routing for resize_pad); otherwise the
    attack runs against the bare model and only evaluation is defended.
    """

    def __init__(self, base, spec, white_box_aware=False):
        self.base = base
        self.spec = spec
        self.white_box_aware = white_box_aware
        self.name = f"{base.name}+{spec.kind}"
        self.input_shape = base.input_shape
        self.embed_dim = base.embed_dim
        self.pixel_scale = base.pixel_scale

    def forward(self, image):
        image = np.asarray(image, dtype=np.float64)
        if image.ndim == 4:
            return np.stack([self.forward(im) for im in image])
        return self.base.forward(apply_defense(image, self.spec))

    def distance_gradient(self, image, reference):
        if not self.white_box_aware:
            return self.base.distance_gradient(image, reference)
        image = np.asarray(image, dtype=np.float64)
        if self.spec.kind == "resize_pad":
            rng = make_rng(self.spec.seed)
            maps = _resize_pad_maps(image.shape[:2], self.spec.scale_range, rng)
            dist, grad = self.base.distance_gradient(resize_pad_apply(image, maps), reference)
            return dist, resize_pad_backward(grad, maps, image.shape)
        # jpeg / bit_reduce: gradient of the quantizer is zero a.e.; treat the
        # transform as identity in the backward pass (straight-through)
        return self.base.distance_gradient(apply_defense(image, self.spec), reference)

    def input_gradient(self, image, reference):
        return self.distance_gradient(image, reference)[1]


# --- classification heads -----------------------------------------------------


def _softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _angle_pieces(cos_target, multiplier):
    """Monotone piecewise extension of cos(multiplier * theta) on [0, pi]."""
    theta = np.arccos(np.clip(cos_target, -1.0, 1.0))
    k = np.floor(multiplier * theta / math.pi)
    sign = np.where(k % 2 == 0, 1.0, -1.0)
    psi = sign * np.cos(multiplier * theta) - 2.0 * k
    sin_theta = np.maximum(np.sin(theta), 1e-6)
    dpsi_dcos = multiplier * sign * np.sin(multiplier * theta) / sin_theta
    return psi, dpsi_dcos


_ANGULAR = ("a_softmax", "am_softmax", "lmcl", "arcface")


@dataclass
class ClassifierHead:
    """Weight matrix (C, d) plus one of the benchmark loss formulations.

    Angular kinds evaluate on renormalized weight rows and scale the
    margin-adjusted cosine logits by ``scale``. The margin convention is
    uniform: margin 0 disables every loss's margin, so for the multiplicative
    kind (a_softmax) the angle multiplier is ``1 + margin``.
    """

    weight: np.ndarray
    loss_kind: str = "softmax"
    margin: float = 0.0
    scale: float = 30.0

    def __post_init__(self):
        self.weight = np.ascontiguousarray(self.weight, dtype=np.float64)
        if self.weight.ndim != 2:
            raise ConfigError("head weight must be (classes, embed_dim)")
        if self.loss_kind not in ("softmax",) + _ANGULAR:
            raise ConfigError(f"unknown loss kind {self.loss_kind!r}")
        if self.scale <= 0:
            raise ConfigError("head scale must be positive")
        if self.margin < 0:
            raise ConfigError("head margin must be non-negative")

    @property
    def num_classes(self):
        return self.weight.shape[0]

    def trainable_arrays(self):
        return [self.weight]

    def renormalize(self):
        """Project weight rows back to unit norm (angular kinds, after updates)."""
        if self.loss_kind in _ANGULAR:
            norms = np.linalg.norm(self.weight, axis=1, keepdims=True)
            norms[norms == 0.0] = 1.0
            self.weight /= norms

    def _unit_weight(self):
        norms = np.linalg.norm(self.weight, axis=1, keepdims=True)
        norms[norms == 0.0] = 1.0
        return self.weight / norms

    def plain_logits(self, emb):
        """Label-free logits: raw dot products (softmax) or scaled cosines."""
        if self.loss_kind == "softmax":
            return emb @ self.weight.T, self.weight
        wn = self._unit_weight()
        return self.scale * (emb @ wn.T), wn

    def _target_adjustment(self, cos_target):
        """Adjusted target cosine and its derivative w.r.t. the raw cosine."""
        if self.loss_kind in ("am_softmax", "lmcl"):
            return cos_target - self.margin, np.ones_like(cos_target)
        if self.loss_kind == "arcface":
            theta = np.arccos(np.clip(cos_target, -1.0, 1.0))
            sin_theta = np.maximum(np.sin(theta), 1e-6)
            adj = np.cos(theta + self.margin)
            return adj, np.sin(theta + self.margin) / sin_theta
        # a_softmax: multiplicative angle margin, multiplier 1 + m
        return _angle_pieces(cos_target, 1.0 + self.margin)

    def loss_and_grads(self, emb, labels):
        """Mean margin loss over a batch.

        Returns ``(loss, grad_embeddings, [grad_weight])`` where the weight
        gradient treats the (renormalized) rows as the free variables; callers
        renormalize after the update.
        """
        emb = np.atleast_2d(np.asarray(emb, dtype=np.float64))
        labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
        n = emb.shape[0]
        if labels.max(initial=0) >= self.num_classes or labels.min(initial=0) < 0:
            raise ConfigError("label outside the head's class count")
        rows = np.arange(n)
        if self.loss_kind == "softmax":
            w = self.weight
            logits = emb @ w.T
            col_factor = None
        else:
            w = self._unit_weight()
            cos = emb @ w.T
            target_cos = cos[rows, labels]
            adj, dadj = self._target_adjustment(target_cos)
            logits = self.scale * cos
            logits[rows, labels] = self.scale * adj
            col_factor = np.ones_like(logits)
            col_factor[rows, labels] = dadj
        probs = _softmax(logits)
        eps = 1e-300
        loss = float(-np.log(probs[rows, labels] + eps).mean())
        dlogits = probs.copy()
        dlogits[rows, labels] -= 1.0
        dlogits /= n
        if self.loss_kind == "softmax":
            grad_emb = dlogits @ w
            grad_w = dlogits.T @ emb
        else:
            eff = self.scale * dlogits * col_factor
            grad_emb = eff @ w
            grad_w = eff.T @ emb
        return loss, grad_emb, [grad_w]


def margin_loss(head, embedding, label):
    """Single-sample loss plus gradients (embedding and head weight)."""
    loss, grad_emb, head_grads = head.loss_and_grads(embedding[None], [label])
    return loss, grad_emb[0], head_grads[0]


# --- adversarial training -------------------------------------------------


@dataclass
class ATConfig:
    epsilon: float = 8.0
    pgd_steps: int = 9
    pgd_alpha: float = 1.0
    norm: str = "linf"
    random_start: bool = True
    framework: str = "pgd_at"  # or "trades"
    trades_beta: float = 6.0
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ConfigError("inner budget must be >= 0")
        if self.pgd_steps < 1:
            raise ConfigError("inner maximization needs at least one step")
        if self.norm not in ("linf", "l2"):
            raise ConfigError(f"unsupported inner norm {self.norm!r}")
        if self.framework not in ("pgd_at", "trades"):
            raise ConfigError(f"unknown AT framework {self.framework!r}")


def _batch_ce_input_grad(model, head, x, y):
    """Cross-entropy loss and per-pixel input gradient for a batch."""
    emb, caches = model._forward_cached(x)
    loss, grad_emb, _ = head.loss_and_grads(emb, y)
    grad = model._backprop_input(caches, grad_emb)
    return loss, grad


def _project_eta(eta, epsilon, norm):
    if norm == "linf":
        return np.clip(eta, -epsilon, epsilon)
    flat = eta.reshape(eta.shape[0], -1)
    norms = np.linalg.norm(flat, axis=1)
    factors = np.where(norms > epsilon, epsilon / np.maximum(norms, 1e-300), 1.0)
    return eta * factors.reshape(-1, *([1] * (eta.ndim - 1)))


def pgd_inner(model, head, x, y, config, rng=None):
    """Inner maximization: ascent steps on the training loss inside the ball.

    ``eta <- project(eta + alpha * sign(grad))`` with an optional uniform
    random start; pixels stay clamped to [0, 255].
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
        y = np.atleast_1d(y)
    if config.epsilon == 0.0:
        return x[0] if single else x
    if config.random_start:
        if rng is None:
            rng = make_rng(config.seed)
        eta = rng.uniform(-config.epsilon, config.epsilon, size=x.shape)
        eta = _project_eta(eta, config.epsilon, config.norm)
    else:
        eta = np.zeros_like(x)
    eta = np.clip(x + eta, 0.0, 255.0) - x
    for _ in range(config.pgd_steps):
        _, grad = _batch_ce_input_grad(model, head, x + eta, y)
        if config.norm == "linf":
            eta = eta + config.pgd_alpha * np.sign(grad)
        else:
            flat = grad.reshape(grad.shape[0], -1)
            norms = np.maximum(np.linalg.norm(flat, axis=1), 1e-300)
            eta = eta + config.pgd_alpha * grad / norms.reshape(-1, *([1] * (grad.ndim - 1)))
        eta = _project_eta(eta, config.epsilon, config.norm)
        eta = np.clip(x + eta, 0.0, 255.0) - x
    out = x + eta
    return out[0] if single else out


def _kl_grads(logits_nat, logits_adv):
    """KL(p_nat || p_adv) averaged over the batch, plus logit gradients."""
    p = _softmax(logits_nat)
    q = _softmax(logits_adv)
    n = logits_nat.shape[0]
    eps = 1e-300
    a = np.log(p + eps) - np.log(q + eps)
    kl = float((p * a).sum(axis=1).mean())
    dlogits_adv = (q - p) / n
    dlogits_nat = p * (a - (p * a).sum(axis=1, keepdims=True)) / n
    return kl, dlogits_nat, dlogits_adv


def _logits_backward(head, emb, dlogits):
    """Gradients of label-free logits w.r.t. embeddings and head weight."""
    if head.loss_kind == "softmax":
        return dlogits @ head.weight, dlogits.T @ emb
    wn = head._unit_weight()
    return head.scale * (dlogits @ wn), head.scale * (dlogits.T @ emb)


def _trades_inner(model, head, x, y, config, rng):
    """Ascent on the predictive divergence between clean and perturbed inputs."""
    logits_nat, _ = head.plain_logits(model.forward(x))
    if config.random_start:
        eta = rng.uniform(-config.epsilon, config.epsilon, size=x.shape)
        eta = _project_eta(eta, config.epsilon, config.norm)
    else:
        eta = np.zeros_like(x)
    eta = np.clip(x + eta, 0.0, 255.0) - x
    for _ in range(config.pgd_steps):
        emb, caches = model._forward_cached(x + eta)
        logits_adv, _ = head.plain_logits(emb)
        _, _, dlogits_adv = _kl_grads(logits_nat, logits_adv)
        grad_emb, _ = _logits_backward(head, emb, dlogits_adv)
        grad = model._backprop_input(caches, grad_emb)
        if config.norm == "linf":
            eta = eta + config.pgd_alpha * np.sign(grad)
        else:
            flat = grad.reshape(grad.shape[0], -1)
            norms = np.maximum(np.linalg.norm(flat, axis=1), 1e-300)
            eta = eta + config.pgd_alpha * grad / norms.reshape(-1, *([1] * (grad.ndim - 1)))
        eta = _project_eta(eta, config.epsilon, config.norm)
        eta = np.clip(x + eta, 0.0, 255.0) - x
    return x + eta


def _pgd_at_step(model, head, x, y, config, rng):
    if config.epsilon > 0.0:
        x_in = pgd_inner(model, head, x, y, config, rng)
    else:
        x_in = x
    holder = {}

    def loss_fn(emb, labels):
        loss, grad_emb, head_grads = head.loss_and_grads(emb, labels)
        holder["head"] = head_grads
        return loss, grad_emb

    loss, model_grads = parameter_gradients(model, x_in, y, loss_fn)
    return loss, model_grads + holder["head"]


def _trades_step(model, head, x, y, config, rng):
    emb_nat, caches_nat = model._forward_cached(x)
    ce_loss, dembnat_ce, head_grads_ce = head.loss_and_grads(emb_nat, y)
    if config.epsilon > 0.0:
        x_adv = _trades_inner(model, head, x, y, config, rng)
        emb_adv, caches_adv = model._forward_cached(x_adv)
        logits_nat, _ = head.plain_logits(emb_nat)
        logits_adv, _ = head.plain_logits(emb_adv)
        kl, dlog_nat, dlog_adv = _kl_grads(logits_nat, logits_adv)
        demb_nat_kl, dw_nat = _logits_backward(head, emb_nat, dlog_nat)
        demb_adv, dw_adv = _logits_backward(head, emb_adv, dlog_adv)
        beta = config.trades_beta
        loss = ce_loss + beta * kl
        grad_emb_nat = dembnat_ce + beta * demb_nat_kl
        grad_emb_adv = beta * demb_adv
        head_grad = head_grads_ce[0] + beta * (dw_nat + dw_adv)
    else:
        loss = ce_loss
        grad_emb_nat = dembnat_ce
        grad_emb_adv = None
        head_grad = head_grads_ce[0]

    model_grads = _accumulate_param_grads(model, caches_nat, grad_emb_nat)
    if grad_emb_adv is not None:
        adv_grads = _accumulate_param_grads(model, caches_adv, grad_emb_adv)
        model_grads = [a + b for a, b in zip(model_grads, adv_grads)]
    return loss, model_grads + [head_grad]


def _accumulate_param_grads(model, caches, grad_emb):
    grads = [None] * len(model.layers)
    grad = grad_emb
    for i in range(len(model.layers) - 1, -1, -1):
        grad, param_grads = model.layers[i].backward(caches[i], grad)
        grads[i] = param_grads
    flat = []
    for g in grads:
        flat.extend(g)
    return flat


def _classification_accuracy(model, head, images, labels, batch_size=256):
    hits = 0
    for start in range(0, len(images), batch_size):
        emb = model.forward(images[start : start + batch_size])
        logits, _ = head.plain_logits(emb)
        hits += int((logits.argmax(axis=1) == labels[start : start + batch_size]).sum())
    return hits / len(images)


def adversarial_train(dataset, model, head, config):
    """Train ``model`` (and ``head``) in place; returns (model, head, log).

    ``dataset`` is ``(images, labels)`` with images (n, h, w, c) in [0, 255].
    With epsilon 0 the inner loop is skipped entirely, so the run is ordinary
    natural training with an identical loss trajectory for the same seed.
    The log holds one row per epoch: (epoch, natural_loss, robust_loss,
    eval_accuracy).
    """
    images, labels = dataset
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    rng = make_rng(config.seed)
    params = model.parameters() + head.trainable_arrays()
    opt = Adam(params, lr=config.learning_rate)
    step = _trades_step if config.framework == "trades" else _pgd_at_step
    log = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(images))
        robust_losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            loss, grads = step(model, head, images[idx], labels[idx], config, rng)
            if not np.isfinite(loss):
                raise NumericError(
                    f"training loss diverged at epoch {epoch} (batch offset {start})"
                )
            opt.step(grads)
            head.renormalize()
            robust_losses.append(loss)
        nat_loss = 0.0
        for start in range(0, len(images), 256):
            chunk = slice(start, start + 256)
            emb = model.forward(images[chunk])
            part, _, _ = head.loss_and_grads(emb, labels[chunk])
            nat_loss += part * (min(start + 256, len(images)) - start)
        nat_loss /= len(images)
        acc = _classification_accuracy(model, head, images, labels)
        log.append(
            {
                "epoch": epoch,
                "natural_loss": float(nat_loss),
                "robust_loss": float(np.mean(robust_losses)),
                "eval_accuracy": float(acc),
            }
        )
    return model, head, log


def save_training_log(path, log):
    with open(path, "w") as fh:
        fh.write("epoch,natural_loss,robust_loss,eval_accuracy\n")
        for row in log:
            fh.write(
                f"{row['epoch']},{row['natural_loss']!r},"
                f"{row['robust_loss']!r},{row['eval_accuracy']!r}\n"
            )
