"""Gradient-based attacks on verification, parameterized by threat model.

Conventions
-----------
* Images live in [0, 255]; epsilon and step sizes are in those pixel units.
  For the l2 norm, epsilon is the raw Euclidean radius (the evaluation layer
  converts to/from the dimension-normalized measurement).
* Dodging climbs the feature distance (+grad), impersonation descends it
  (-grad); sign(0) = 0, so a zero budget or zero gradient is an exact no-op.
* Every iterative method runs through one momentum core, which makes the
  degenerate-case reductions (mim with mu=0 is bim, masked methods with an
  empty mask are their unmasked base, and so on) hold bit-for-bit.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .defenses import _resize_pad_maps, resize_pad_apply, resize_pad_backward
from .errors import ConfigError
from .masks import MaskConfig, apply_mask, sample_mask, sample_mask_without_replacement
from .nn.optim import Adam
from .seeding import make_rng

ATTACK_METHODS = (
    "fgsm", "bim", "mim", "cw", "lgc", "cim", "dim", "tim", "lgc_dim", "lgc_tim",
)


@dataclass(frozen=True)
class ThreatModel:
    goal: str  # dodging | impersonation
    norm: str  # l2 | linf
    epsilon: float

    def __post_init__(self):
        if self.goal not in ("dodging", "impersonation"):
            raise ConfigError(f"unknown goal {self.goal!r}")
        if self.norm not in ("l2", "linf"):
            raise ConfigError(f"unknown norm {self.norm!r}")
        if self.epsilon < 0:
            raise ConfigError("epsilon must be >= 0")
        if self.norm == "linf" and self.epsilon > 255:
            raise ConfigError("linf epsilon cannot exceed 255")


def gaussian_kernel(size=5, sigma=1.0):
    if size % 2 == 0:
        raise ConfigError("translation kernel must be odd-sized")
    ax = np.arange(size) - size // 2
    k = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * sigma**2))
    return k / k.sum()


@dataclass
class AttackConfig:
    """Hyperparameters for all attack families; unset fields take the
    benchmark defaults (step size 1.5*eps/steps, momentum 1.0, c 1e-3)."""

    method: str = "bim"
    steps: int = 20
    step_size: float | None = None
    momentum: float = 1.0
    cw_c: float = 1e-3
    cw_iters: int = 100
    cw_search_steps: int = 6
    cw_lr: float = 0.01
    mask: MaskConfig | None = None
    mask_replacement: bool = True
    dim_p: float = 0.5
    scale_range: tuple = (0.85, 1.0)
    tim_kernel: np.ndarray | None = None
    seed: int = 0

    def __post_init__(self):
        if self.method not in ATTACK_METHODS:
            raise ConfigError(f"unknown attack method {self.method!r}")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.momentum < 0:
            raise ConfigError("momentum must be >= 0")
        if self.cw_c <= 0:
            raise ConfigError("cw_c must be > 0")
        if not 0.0 <= self.dim_p <= 1.0:
            raise ConfigError("dim_p must lie in [0, 1]")
        if self.tim_kernel is not None:
            k = np.asarray(self.tim_kernel, dtype=np.float64)
            if k.ndim != 2 or k.shape[0] % 2 == 0 or k.shape[1] % 2 == 0:
                raise ConfigError("tim kernel must be 2-D and odd-sized")
            if (k < 0).any() or not math.isclose(k.sum(), 1.0, rel_tol=0, abs_tol=1e-9):
                raise ConfigError("tim kernel must be non-negative and sum to 1")
            self.tim_kernel = k

    def alpha(self, epsilon):
        if self.step_size is not None:
            return self.step_size
        return 1.5 * epsilon / self.steps

    def with_seed(self, seed):
        return replace(self, seed=seed)


@dataclass
class AttackOutcome:
    image: np.ndarray
    success: bool
    final_distance: float
    l2_raw: float
    l2_normalized: float
    linf: float
    steps_used: int
    warnings: tuple = ()

    def same_image(self, other):
        return (
            self.image.shape == other.image.shape
            and self.image.tobytes() == other.image.tobytes()
        )


def project(candidate, original, threat):
    """Pull a candidate back into the threat ball, then into [0, 255].

    linf clamps per pixel into [x - eps, x + eps]; l2 scales the perturbation
    radially onto the eps sphere when it pokes out. The pixel clamp can only
    shrink per-pixel deviations, so both bounds survive it.
    """
    delta = candidate - original
    if threat.norm == "linf":
        delta = np.clip(delta, -threat.epsilon, threat.epsilon)
    else:
        norm = float(np.linalg.norm(delta.ravel()))
        if norm > threat.epsilon:
            delta = delta * (threat.epsilon / norm)
    return np.clip(original + delta, 0.0, 255.0)


def _goal_sign(goal):
    return 1.0 if goal == "dodging" else -1.0


def _is_success(distance, delta, goal):
    # verify() says "same" iff distance < delta (strict); success means the
    # verification outcome flips against the pair's true label
    if goal == "dodging":
        return not distance < delta
    return distance < delta


def _conv_same(grad, kernel):
    kh, kw = kernel.shape
    ph, pw = kh // 2, kw // 2
    h, w = grad.shape[:2]
    padded = np.pad(grad, ((ph, ph), (pw, pw), (0, 0)))
    out = np.zeros_like(grad)
    for i in range(kh):
        for j in range(kw):
            out += kernel[i, j] * padded[i : i + h, j : j + w, :]
    return out


def _perturbation_norms(x_adv, x):
    delta = (x_adv - x).ravel()
    l2 = float(np.linalg.norm(delta))
    return l2, l2 / math.sqrt(delta.size), float(np.abs(delta).max(initial=0.0))


def _finalize(model, delta_thr, x, x_adv, ref_emb, threat, steps_used, warnings):
    diff = model.forward(x_adv) - ref_emb
    distance = float(np.clip((diff * diff).sum(), 0.0, 4.0))
    l2_raw, l2_norm, linf = _perturbation_norms(x_adv, x)
    return AttackOutcome(
        image=x_adv,
        success=_is_success(distance, delta_thr, threat.goal),
        final_distance=distance,
        l2_raw=l2_raw,
        l2_normalized=l2_norm,
        linf=linf,
        steps_used=steps_used,
        warnings=tuple(warnings),
    )


def _momentum_core(model, delta_thr, x, ref_emb, threat, config, landmarks, *,
                   steps, alpha, mu, mask_cfg, use_dim, kernel):
    """Shared iterative loop: Eq.-style momentum sign steps with projection.

    Per iteration the gradient is evaluated at the (optionally masked, then
    optionally resize-padded) current iterate, while the update itself always
    applies to the unmasked image.
    """
    rng = make_rng(config.seed)
    x = np.asarray(x, dtype=np.float64)
    x_adv = x.copy()
    g_buf = np.zeros_like(x)
    sign_goal = _goal_sign(threat.goal)
    saw_nonzero_grad = False
    masked = mask_cfg is not None and mask_cfg.num_squares > 0 and mask_cfg.side > 0
    for _ in range(steps):
        x_for_grad = x_adv
        maps = None
        if masked:
            if mask_cfg.mode == "landmark" and not config.mask_replacement:
                mask = sample_mask_without_replacement(x.shape[:2], mask_cfg, landmarks, rng)
            else:
                mask = sample_mask(x.shape[:2], mask_cfg, landmarks, rng)
            x_for_grad = apply_mask(mask, x_for_grad)
        if use_dim and config.dim_p > 0.0:
            if rng.uniform() < config.dim_p:
                maps = _resize_pad_maps(x.shape[:2], config.scale_range, rng)
                x_for_grad = resize_pad_apply(x_for_grad, maps)
        _, grad = model.distance_gradient(x_for_grad, ref_emb)
        if maps is not None:
            grad = resize_pad_backward(grad, maps, x.shape)
        grad = sign_goal * grad
        if kernel is not None:
            grad = _conv_same(grad, kernel)
        l1 = float(np.abs(grad).sum())
        if l1 > 0.0:
            saw_nonzero_grad = True
            g_buf = mu * g_buf + grad / l1
        else:
            g_buf = mu * g_buf
        if threat.norm == "linf":
            x_adv = x_adv + alpha * np.sign(g_buf)
        else:
            g_norm = float(np.linalg.norm(g_buf.ravel()))
            if g_norm > 0.0:
                x_adv = x_adv + alpha * g_buf / g_norm
        x_adv = project(x_adv, x, threat)
    warnings = [] if saw_nonzero_grad else ["zero_gradient"]
    return _finalize(model, delta_thr, x, x_adv, ref_emb, threat, steps, warnings)


def _cw(model, delta_thr, x, ref_emb, threat, config):
    """Minimum-distortion l2 attack in a tanh box reparameterization.

    Minimizes ||x' - x||^2 + c * penalty on the [0, 1] pixel scale with an
    adaptive-moment optimizer; c starts at cw_c and is tuned by the usual
    escalate-then-bisect search, keeping the smallest-norm feasible iterate.
    """
    if threat.norm != "l2":
        raise ConfigError("the optimization-based attack runs under the l2 norm only")
    x = np.asarray(x, dtype=np.float64)
    x01 = x / 255.0
    w0 = np.arctanh(np.clip(x01 * 2.0 - 1.0, -1.0 + 1e-12, 1.0 - 1e-12))
    dodging = threat.goal == "dodging"
    lower, upper = 0.0, None
    c = config.cw_c
    best_img, best_l2 = None, math.inf
    fallback_img, fallback_score = x.copy(), -math.inf
    total_iters = 0
    for _ in range(config.cw_search_steps):
        w = w0.copy()
        opt = Adam([w], lr=config.cw_lr)
        found = False
        for _ in range(config.cw_iters):
            x01_adv = (np.tanh(w) + 1.0) / 2.0
            x_adv = x01_adv * 255.0
            dist, grad_pix = model.distance_gradient(x_adv, ref_emb)
            total_iters += 1
            if _is_success(dist, delta_thr, threat.goal):
                found = True
                l2 = float(np.linalg.norm((x_adv - x).ravel()))
                if l2 < best_l2:
                    best_l2, best_img = l2, x_adv.copy()
            score = dist if dodging else -dist
            if score > fallback_score:
                fallback_score, fallback_img = score, x_adv.copy()
            grad_obj = 2.0 * (x01_adv - x01)
            if dodging:
                if dist < delta_thr:
                    grad_obj -= c * 255.0 * grad_pix
            else:
                if dist > delta_thr:
                    grad_obj += c * 255.0 * grad_pix
            opt.step([grad_obj * (1.0 - np.tanh(w) ** 2) / 2.0])
        if found:
            upper = c
            c = (lower + upper) / 2.0
        else:
            lower = c
            c = c * 10.0 if upper is None else (lower + upper) / 2.0
    if best_img is None:
        return _finalize(
            model, delta_thr, x, fallback_img, ref_emb, threat, total_iters,
            ["no_feasible_point"],
        )
    return _finalize(model, delta_thr, x, best_img, ref_emb, threat, total_iters, [])


def run_attack_with_reference(model, delta_thr, x, ref_emb, threat, config, landmarks=None):
    """Run the configured attack against a precomputed reference embedding."""
    method = config.method
    if method == "cw":
        return _cw(model, delta_thr, x, ref_emb, threat, config)

    steps = config.steps
    alpha = config.alpha(threat.epsilon)
    mu = 0.0
    mask_cfg = None
    use_dim = False
    kernel = None
    if method == "fgsm":
        steps, alpha = 1, threat.epsilon
    elif method == "bim":
        pass
    elif method == "mim":
        mu = config.momentum
    elif method in ("lgc", "cim", "lgc_dim", "lgc_tim"):
        if method in ("lgc", "lgc_dim", "lgc_tim"):
            mask_cfg = config.mask if config.mask is not None else MaskConfig()
            if mask_cfg.mode != "landmark":
                raise ConfigError(f"{method} requires a landmark-mode mask")
            if mask_cfg.num_squares > 0 and (landmarks is None or len(landmarks) == 0):
                raise ConfigError(f"{method} requires landmarks for the input image")
        else:
            mask_cfg = config.mask if config.mask is not None else MaskConfig(
                num_squares=1, side=10, mode="random"
            )
        if method == "lgc":
            mu = config.momentum
        elif method == "cim":
            mu = config.momentum
        elif method == "lgc_dim":
            use_dim = True
        else:
            kernel = config.tim_kernel if config.tim_kernel is not None else gaussian_kernel()
    elif method == "dim":
        use_dim = True
    elif method == "tim":
        kernel = config.tim_kernel if config.tim_kernel is not None else gaussian_kernel()

    return _momentum_core(
        model, delta_thr, x, ref_emb, threat, config, landmarks,
        steps=steps, alpha=alpha, mu=mu, mask_cfg=mask_cfg,
        use_dim=use_dim, kernel=kernel,
    )


def run_attack(model, delta_thr, x, x_ref, threat, config, landmarks=None):
    """Attack image ``x`` so that verification against ``x_ref`` flips."""
    ref_emb = model.forward(np.asarray(x_ref, dtype=np.float64))
    return run_attack_with_reference(model, delta_thr, x, ref_emb, threat, config, landmarks)


def fgsm(model, delta_thr, x, x_ref, threat, config=None):
    config = replace(config or AttackConfig(), method="fgsm")
    return run_attack(model, delta_thr, x, x_ref, threat, config)


def bim(model, delta_thr, x, x_ref, threat, config=None):
    config = replace(config or AttackConfig(), method="bim")
    return run_attack(model, delta_thr, x, x_ref, threat, config)


def mim(model, delta_thr, x, x_ref, threat, config=None):
    config = replace(config or AttackConfig(), method="mim")
    return run_attack(model, delta_thr, x, x_ref, threat, config)


def cw(model, delta_thr, x, x_ref, threat, config=None):
    config = replace(config or AttackConfig(), method="cw")
    return run_attack(model, delta_thr, x, x_ref, threat, config)


def lgc(model, delta_thr, x, x_ref, landmarks, threat, config=None):
    config = replace(config or AttackConfig(), method="lgc")
    return run_attack(model, delta_thr, x, x_ref, threat, config, landmarks=landmarks)


def cim(model, delta_thr, x, x_ref, threat, config=None):
    config = replace(config or AttackConfig(), method="cim")
    return run_attack(model, delta_thr, x, x_ref, threat, config)


def dim(model, delta_thr, x, x_ref, threat, config=None):
    config = replace(config or AttackConfig(), method="dim")
    return run_attack(model, delta_thr, x, x_ref, threat, config)


def tim(model, delta_thr, x, x_ref, threat, config=None):
    config = replace(config or AttackConfig(), method="tim")
    return run_attack(model, delta_thr, x, x_ref, threat, config)
