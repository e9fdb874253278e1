"""l-infinity attacks against the signature detector.

Every attack works on one image ``x`` of shape ``(d,)`` (returning an
:class:`AttackResult`) or on a batch ``(n, d)`` (returning an
:class:`AttackBatch`). Batches are processed in lockstep, one vectorised
gradient evaluation per iteration, so each row follows exactly the
trajectory it would follow alone.

Attacks are untargeted: the cross-entropy term is ascended on the true label.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import Callable

import numpy as np

from . import nn_core
from .data import Dataset
from .errors import ConfigError, DegenerateError, ShapeError
from .nn_core import ModelParams

STEP_RULES = ("sign", "raw_gradient")
ORTHO_MODES = ("rejection", "paper_literal", "off")
SELECT_RULES = ("best", "last")


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 8 / 255
    eta: float = 0.1
    lambda_weight: float = 8.0
    iterations: int = 100
    step_rule: str = "sign"
    ortho_mode: str = "rejection"
    seed: int = 0
    random_start: bool = False
    # "best": return the misclassified iterate with the lowest detection score
    # (falls back to the last iterate); "last": always the last iterate
    select: str = "best"

    def __post_init__(self):
        if self.epsilon <= 0 or self.eta <= 0:
            raise ConfigError("epsilon and eta must be > 0")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.step_rule not in STEP_RULES:
            raise ConfigError(f"step_rule must be one of {STEP_RULES}")
        if self.ortho_mode not in ORTHO_MODES:
            raise ConfigError(f"ortho_mode must be one of {ORTHO_MODES}")
        if self.select not in SELECT_RULES:
            raise ConfigError(f"select must be one of {SELECT_RULES}")


@dataclass
class AttackResult:
    x_adv: np.ndarray
    delta_linf: float
    misclassified: bool
    target_or_true_label: int
    detection_score: float
    iterations_used: int
    xent_steps: int = 0
    detection_steps: int = 0
    degenerate_steps: int = 0


@dataclass
class AttackBatch:
    """Column-wise results for a batch; field names mirror :class:`AttackResult`."""

    x_adv: np.ndarray
    delta_linf: np.ndarray
    misclassified: np.ndarray
    target_or_true_label: np.ndarray
    detection_score: np.ndarray
    iterations_used: np.ndarray
    xent_steps: np.ndarray
    detection_steps: np.ndarray
    degenerate_steps: np.ndarray
    extra: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.x_adv)

    def __getitem__(self, i) -> AttackResult:
        kw = {}
        for f in fields(AttackResult):
            v = getattr(self, f.name)[i]
            kw[f.name] = v if f.name == "x_adv" else v.item()
        return AttackResult(**kw)

    def results(self) -> list[AttackResult]:
        return [self[i] for i in range(len(self))]


def project_linf(x, delta, epsilon: float) -> np.ndarray:
    """Clamp ``delta`` into the epsilon box and so that ``x + delta`` stays in [0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if x.shape != delta.shape:
        raise ShapeError(f"x {x.shape} and delta {delta.shape} differ")
    delta = np.clip(delta, -epsilon, epsilon)
    return np.clip(delta, -x, 1.0 - x)


def _rows_dot(a, b):
    return np.einsum("ij,ij->i", a, b)


def _orthogonalize_rows(g_x, g_d, mode):
    """Row-wise orthogonalize; rows with zero g_d (or zero g_x in paper_literal) pass g_x through."""
    if mode == "off":
        return g_x.copy()
    dot = _rows_dot(g_d, g_x)
    nd = np.linalg.norm(g_d, axis=1)
    if mode == "rejection":
        denom = nd**2
    else:
        denom = nd * np.linalg.norm(g_x, axis=1)
    ok = denom > 0
    coef = np.divide(dot, denom, out=np.zeros_like(dot), where=ok)
    return g_x - g_d * coef[:, None]


def orthogonalize(g_x, g_d, mode: str = "rejection") -> np.ndarray:
    """Remove the ``g_d`` component from ``g_x``.

    ``rejection`` divides by |g_d|^2 and yields an exactly orthogonal vector.
    ``paper_literal`` divides by |g_d||g_x|, which is orthogonal only when the
    norms agree or the vectors already are. ``off`` returns ``g_x``.
    """
    if mode not in ORTHO_MODES:
        raise ConfigError(f"ortho_mode must be one of {ORTHO_MODES}")
    g_x = np.asarray(g_x, dtype=np.float64)
    g_d = np.asarray(g_d, dtype=np.float64)
    if g_x.shape != g_d.shape:
        raise ShapeError(f"g_x {g_x.shape} and g_d {g_d.shape} differ")
    if mode == "off":
        return g_x.copy()
    gx2, gd2 = np.atleast_2d(g_x), np.atleast_2d(g_d)
    if np.any(np.linalg.norm(gd2, axis=1) == 0):
        raise DegenerateError("g_d is the zero vector; use mode='off'")
    out = _orthogonalize_rows(gx2, gd2, mode)
    return out[0] if g_x.ndim == 1 else out


def _step(g, cfg: AttackConfig):
    if cfg.step_rule == "sign":
        return cfg.eta * cfg.epsilon * np.sign(g)
    return cfg.eta * g


def _prepare(params, x, y):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.ndim != 2 or xb.shape[1] != params.arch.input_dim:
        raise ShapeError(f"input shape {x.shape} incompatible with input_dim {params.arch.input_dim}")
    yb = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if yb.shape != (len(xb),):
        raise ShapeError(f"expected {len(xb)} labels, got {yb.shape}")
    return xb, yb, single


def _init_delta(xb, cfg):
    if not cfg.random_start:
        return np.zeros_like(xb)
    rng = np.random.default_rng([cfg.seed, 4])
    return project_linf(xb, rng.uniform(-cfg.epsilon, cfg.epsilon, xb.shape), cfg.epsilon)


def _finish(params, xb, yb, delta, cfg, phi, counts, single, best=None):
    x_adv = np.clip(xb + delta, 0.0, 1.0)
    if best is not None:
        x_adv[best.found] = best.x[best.found]
    pred = nn_core.predict(params, x_adv)
    score = np.full(len(xb), np.nan) if phi is None else _scores(params, x_adv, phi)
    n = len(xb)
    batch = AttackBatch(
        x_adv=x_adv,
        delta_linf=np.max(np.abs(x_adv - xb), axis=1),
        misclassified=pred != yb,
        target_or_true_label=yb.copy(),
        detection_score=score,
        iterations_used=np.full(n, cfg.iterations),
        xent_steps=counts["xent"],
        detection_steps=counts["detect"],
        degenerate_steps=counts["degenerate"],
    )
    return batch[0] if single else batch


def _scores(params, x_adv, phi):
    """Row-wise cosine of h(x_adv) with phi (one vector or one per row); -1 for zero h."""
    h = nn_core.hidden(params, x_adv)
    phi = np.broadcast_to(np.asarray(phi, dtype=np.float64), h.shape)
    nh, np_ = np.linalg.norm(h, axis=1), np.linalg.norm(phi, axis=1)
    ok = (nh > 0) & (np_ > 0)
    cos = np.divide(_rows_dot(h, phi), nh * np_, out=np.full(len(h), -1.0), where=ok)
    return np.clip(cos, -1.0, 1.0)


class _Best:
    """Per-row misclassified iterate with the lowest detection score seen so far."""

    def __init__(self, xb):
        self.found = np.zeros(len(xb), dtype=bool)
        self.score = np.full(len(xb), np.inf)
        self.x = xb.copy()

    def update(self, xa, adv, score):
        improved = adv & (score < self.score)
        self.found |= improved
        self.score[improved] = score[improved]
        self.x[improved] = np.clip(xa[improved], 0.0, 1.0)


def _counts(n):
    return {k: np.zeros(n, dtype=np.int64) for k in ("xent", "detect", "degenerate")}


def pgd_xent(params: ModelParams, x, y, cfg: AttackConfig = AttackConfig()):
    """Untargeted PGD ascending cross-entropy on the true label; returns the last iterate."""
    return joint_attack(params, None, x, y, replace(cfg, lambda_weight=0.0))


def joint_attack(params: ModelParams, phi, x, y, cfg: AttackConfig = AttackConfig()):
    """Projected ascent on ``xent(f(x+d), y) - lambda * cos(h(x+d), phi)``."""
    xb, yb, single = _prepare(params, x, y)
    delta = _init_delta(xb, cfg)
    counts = _counts(len(xb))
    use_detector = phi is not None and cfg.lambda_weight != 0
    best = _Best(xb) if phi is not None and cfg.select == "best" else None
    for it in range(cfg.iterations + 1):
        xa = xb + delta
        trace = nn_core.forward(params, xa)
        if phi is not None:
            score, g_d, degenerate = nn_core.detection_and_input_grad(params, xa, phi, trace)
            if best is not None:
                best.update(xa, np.argmax(trace.logits, axis=1) != yb, score)
        if it == cfg.iterations:
            break
        _, g = nn_core.xent_and_input_grad(params, xa, yb, trace)
        if use_detector:
            g = g - cfg.lambda_weight * g_d
            counts["degenerate"] += degenerate
        counts["xent"] += 1
        delta = project_linf(xb, delta + _step(g, cfg), cfg.epsilon)
    return _finish(params, xb, yb, delta, cfg, phi, counts, single, best)


def alternating_attack(params: ModelParams, phi, x, y, cfg: AttackConfig = AttackConfig()):
    """Alternate detection-descent and (orthogonalized) cross-entropy ascent.

    While ``f(x+d) != y`` a step descends ``cos(h(x+d), phi)``; otherwise a
    step ascends cross-entropy along ``orthogonalize(g_x, g_d, cfg.ortho_mode)``.
    The returned example is the misclassified iterate with the lowest
    detection score, or the last iterate if none was misclassified.
    """
    xb, yb, single = _prepare(params, x, y)
    n = len(xb)
    delta = _init_delta(xb, cfg)
    counts = _counts(n)
    best = _Best(xb) if cfg.select == "best" else None
    for it in range(cfg.iterations + 1):
        xa = xb + delta
        trace = nn_core.forward(params, xa)
        score, g_d, degenerate = nn_core.detection_and_input_grad(params, xa, phi, trace)
        adv = np.argmax(trace.logits, axis=1) != yb
        if best is not None:
            best.update(xa, adv, score)
        if it == cfg.iterations:
            break
        counts["degenerate"] += degenerate
        step = np.empty_like(delta)
        if np.any(adv):
            step[adv] = -_step(g_d[adv], cfg)
        if not np.all(adv):
            keep = ~adv
            _, g_x = nn_core.xent_and_input_grad(params, xa, yb, trace)
            direction = _orthogonalize_rows(g_x[keep], g_d[keep], cfg.ortho_mode)
            step[keep] = _step(direction, cfg)
        counts["detect"] += adv
        counts["xent"] += ~adv
        delta = project_linf(xb, delta + step, cfg.epsilon)
    return _finish(params, xb, yb, delta, cfg, phi, counts, single, best)


AttackFn = Callable[[ModelParams, np.ndarray, np.ndarray], np.ndarray]


def estimate_signature(
    params: ModelParams,
    benign: Dataset,
    base_attack: AttackFn | None = None,
    cfg: AttackConfig = AttackConfig(),
    allow_unmoved: bool = False,
) -> np.ndarray:
    """Attacker's signature estimate: mean hidden vector of its own adversarial examples.

    ``base_attack(params, images, labels)`` returns adversarial images; the
    default is :func:`pgd_xent` with ``cfg``. Never touches the defender's phi.
    """
    if len(benign) == 0:
        raise ConfigError("signature estimation needs at least one benign sample")
    if base_attack is None:
        def base_attack(p, xs, ys):
            return pgd_xent(p, xs, ys, cfg).x_adv
    x_adv = np.asarray(base_attack(params, benign.images, benign.labels), dtype=np.float64)
    if not allow_unmoved and np.array_equal(x_adv, benign.images):
        raise DegenerateError("base attack did not move any input")
    phi_est = nn_core.hidden(params, x_adv).mean(axis=0)
    if not np.any(phi_est):
        raise DegenerateError("estimated signature is the zero vector")
    return phi_est


@dataclass
class PairResult:
    first: AttackResult | AttackBatch
    second: AttackResult | AttackBatch
    chosen: AttackResult | AttackBatch
    pair_cosine: float | np.ndarray
    coin: int | np.ndarray


def orthogonal_pair_attack(params: ModelParams, phi_ref, x, y, cfg: AttackConfig = AttackConfig()):
    """Two adversarial examples with near-orthogonal hidden vectors, one returned at random.

    The first evades ``phi_ref``; the second evades the first one's hidden
    vector. ``pair_cosine`` is ``|cos(h(x'), h(x''))|``; ``coin`` picks the
    returned example from a fair coin seeded by ``cfg.seed``.
    """
    xb, yb, single = _prepare(params, x, y)
    first = alternating_attack(params, phi_ref, xb, yb, cfg)
    h1 = nn_core.hidden(params, first.x_adv)
    zero = ~np.any(h1, axis=1)
    target = np.where(zero[:, None], np.broadcast_to(phi_ref, h1.shape), h1)
    second = alternating_attack(params, target, xb, yb, cfg)
    h2 = nn_core.hidden(params, second.x_adv)
    n1, n2 = np.linalg.norm(h1, axis=1), np.linalg.norm(h2, axis=1)
    ok = (n1 > 0) & (n2 > 0)
    pair_cos = np.abs(np.divide(_rows_dot(h1, h2), n1 * n2, out=np.zeros(len(xb)), where=ok))
    coin = np.random.default_rng([cfg.seed, 5]).integers(0, 2, len(xb))
    chosen = _select(first, second, coin == 1)
    chosen.detection_score = _scores(params, chosen.x_adv, phi_ref)
    if single:
        return PairResult(first[0], second[0], chosen[0], float(pair_cos[0]), int(coin[0]))
    return PairResult(first, second, chosen, pair_cos, coin)


def _select(a: AttackBatch, b: AttackBatch, take_b: np.ndarray) -> AttackBatch:
    kw = {}
    for f in fields(AttackBatch):
        if f.name == "extra":
            continue
        va, vb = getattr(a, f.name), getattr(b, f.name)
        mask = take_b[:, None] if va.ndim == 2 else take_b
        kw[f.name] = np.where(mask, vb, va)
    return AttackBatch(**kw)
