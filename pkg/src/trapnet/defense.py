"""Trapdoored training and the cosine-similarity signature detector."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import nn_core
from .data import Dataset, Trapdoor, apply_trapdoor
from .errors import ConfigError, DegenerateError, NumericError, ShapeError, TrainingError
from .nn_core import Architecture, ModelParams


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 0.1
    poison_fraction: float = 0.1
    seed: int = 0
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if not 0 < self.poison_fraction < 1:
            raise ConfigError(f"poison_fraction must lie in (0, 1), got {self.poison_fraction}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class Signature:
    phi: np.ndarray
    tau: float
    fpr_target: float
    calibration_size: int
    model_hash: str = ""
    phi_source: str = "train"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.phi = np.asarray(self.phi, dtype=np.float64)
        if not np.any(self.phi):
            raise DegenerateError("signature phi is the zero vector")
        if not -1.0 <= self.tau <= 1.0:
            raise ConfigError(f"tau {self.tau} outside the cosine range [-1, 1]")

    def to_json(self) -> str:
        doc = {
            "format": "trapnet-signature/1",
            "phi": self.phi.tolist(),
            "tau": self.tau,
            "fpr_target": self.fpr_target,
            "calibration_size": self.calibration_size,
            "model_hash": self.model_hash,
            "phi_source": self.phi_source,
            **self.extra,
        }
        return json.dumps(doc, sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "Signature":
        doc = json.loads(text)
        known = {"format", "phi", "tau", "fpr_target", "calibration_size", "model_hash", "phi_source"}
        return cls(
            np.asarray(doc["phi"]),
            float(doc["tau"]),
            float(doc["fpr_target"]),
            int(doc["calibration_size"]),
            doc.get("model_hash", ""),
            doc.get("phi_source", "train"),
            {k: v for k, v in doc.items() if k not in known},
        )


def accuracy(params: ModelParams, ds: Dataset) -> float:
    return float(np.mean(nn_core.predict(params, ds.images) == ds.labels))


def trigger_success(params: ModelParams, ds: Dataset, t: Trapdoor) -> float:
    """Fraction of non-target-class inputs sent to the target class by the trapdoor."""
    keep = ds.labels != t.target_class
    if not np.any(keep):
        return float("nan")
    pred = nn_core.predict(params, apply_trapdoor(ds.images[keep], t))
    return float(np.mean(pred == t.target_class))


def train_trapdoored(
    train: Dataset,
    t: Trapdoor,
    cfg: TrainConfig,
    arch: Architecture,
    test: Dataset | None = None,
    init_seed: int | None = None,
) -> tuple[ModelParams, dict]:
    """Minibatch SGD on cross-entropy with per-epoch trapdoor poisoning.

    Each epoch a fresh seeded ``poison_fraction`` of the training samples is
    replaced by ``(apply_trapdoor(x), target_class)``. Metrics are measured
    on ``test`` when given, else on ``train``.
    """
    if len(train) == 0:
        raise ConfigError("training set is empty")
    if t.mask.shape[0] != arch.input_dim or train.input_dim != arch.input_dim:
        raise ShapeError("trapdoor/dataset dimension does not match the architecture")
    rng = np.random.default_rng([cfg.seed, 3])
    params = nn_core.init_model(arch, cfg.seed if init_seed is None else init_seed)
    n = len(train)
    n_poison = int(round(cfg.poison_fraction * n))
    losses = []
    for epoch in range(cfg.epochs):
        x = train.images.copy()
        y = train.labels.copy()
        poisoned = rng.choice(n, size=n_poison, replace=False)
        x[poisoned] = apply_trapdoor(x[poisoned], t)
        y[poisoned] = t.target_class
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            grads = nn_core.grad_params(params, x[idx], y[idx])
            if cfg.weight_decay:
                grads = [(gw + cfg.weight_decay * w, gb) for (gw, gb), (w, _) in zip(grads, params.layers)]
            try:
                params = nn_core.sgd_step(params, grads, cfg.lr)
            except NumericError as exc:
                raise TrainingError(f"training diverged in epoch {epoch}", epoch) from exc
        loss = nn_core.mean_xent(params, x, y)
        if not math.isfinite(loss):
            raise TrainingError(f"training diverged in epoch {epoch}: loss {loss}", epoch)
        losses.append(loss)
    eval_ds = test if test is not None else train
    metrics = {
        "clean_accuracy": accuracy(params, eval_ds),
        "trigger_success": trigger_success(params, eval_ds, t),
        "final_loss": losses[-1] if losses else None,
        "epochs": cfg.epochs,
    }
    return params, metrics


def compute_signature(params: ModelParams, benign: Dataset, t: Trapdoor) -> np.ndarray:
    """Mean hidden vector of trapdoored benign inputs."""
    if len(benign) == 0:
        raise ConfigError("signature needs at least one benign sample")
    h = nn_core.hidden(params, apply_trapdoor(benign.images, t))
    phi = h.mean(axis=0)
    if not np.any(phi):
        raise DegenerateError("signature is the zero vector")
    return phi


def detection_score(params: ModelParams, phi, x):
    """Cosine similarity between h(x) and phi; -1 where h(x) is zero.

    Returns a float for one input and an array for a batch.
    """
    phi = np.asarray(phi, dtype=np.float64)
    if not np.any(phi):
        raise DegenerateError("signature phi is the zero vector")
    h = nn_core.hidden(params, x)
    return score_hidden(h, phi)


def score_hidden(h, phi):
    h = np.asarray(h, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    h_norm = np.linalg.norm(h, axis=-1)
    phi_norm = np.linalg.norm(phi)
    if phi_norm == 0:
        raise DegenerateError("signature phi is the zero vector")
    safe = np.where(h_norm == 0, 1.0, h_norm)
    s = np.clip((h @ phi) / (safe * phi_norm), -1.0, 1.0)
    s = np.where(h_norm == 0, -1.0, s)
    return float(s) if np.ndim(s) == 0 else s


def calibrate_threshold(benign_scores, fpr_target: float) -> float:
    """Smallest tau with at most ``fpr_target`` of benign scores strictly above it.

    This is the ceil((1 - fpr) * n)-th order statistic of the scores.
    """
    s = np.sort(np.asarray(benign_scores, dtype=np.float64))
    if s.size == 0:
        raise ConfigError("cannot calibrate a threshold on zero scores")
    if not 0 < fpr_target < 1:
        raise ConfigError(f"fpr_target must lie in (0, 1), got {fpr_target}")
    n = s.size
    # tolerance absorbs float error in (1 - fpr) * n, e.g. 0.9 * 100
    k = max(1, math.ceil((1.0 - fpr_target) * n - 1e-9))
    return float(s[k - 1])


def detect(score, tau):
    """True iff ``score > tau`` (ties pass as benign)."""
    return np.asarray(score) > tau if np.ndim(score) else bool(score > tau)
