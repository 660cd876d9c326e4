"""Dense float64 math for a two-layer MLP with momentum SGD.

The network is a feature extractor (W1, b1) with a tanh hidden layer
followed by a linear classifier (W2, b2). The post-activation hidden
layer is the feature tap used by all centroid machinery. tanh is used
instead of a hard-threshold activation so finite-difference gradient
checks stay clean; see ACTIVATION.

All operations are pure: they never mutate their inputs, so parameter
values are safe to copy and hand to parallel workers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, TrainingDiverged

ACTIVATION = "tanh"

# Norms below this are treated as zero vectors by cosine_similarity.
ZERO_NORM_EPS = 1e-12


@dataclass
class GradSet:
    """Per-parameter arrays mirroring ModelParams shapes (gradients or momentum)."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    def copy(self) -> "GradSet":
        return GradSet(self.W1.copy(), self.b1.copy(), self.W2.copy(), self.b2.copy())

    def all_finite(self) -> bool:
        return bool(
            np.isfinite(self.W1).all()
            and np.isfinite(self.b1).all()
            and np.isfinite(self.W2).all()
            and np.isfinite(self.b2).all()
        )

    @staticmethod
    def zeros(d_in: int, d_h: int, n_classes: int) -> "GradSet":
        return GradSet(
            np.zeros((d_in, d_h)),
            np.zeros(d_h),
            np.zeros((d_h, n_classes)),
            np.zeros(n_classes),
        )


@dataclass
class ModelParams:
    """Weights of the two-layer MLP plus the momentum buffer."""

    W1: np.ndarray  # (d_in, d_h)
    b1: np.ndarray  # (d_h,)
    W2: np.ndarray  # (d_h, C)
    b2: np.ndarray  # (C,)
    velocity: GradSet

    @property
    def d_in(self) -> int:
        return self.W1.shape[0]

    @property
    def d_h(self) -> int:
        return self.W1.shape[1]

    @property
    def n_classes(self) -> int:
        return self.W2.shape[1]

    def copy(self, reset_velocity: bool = False) -> "ModelParams":
        """Deep copy; reset_velocity zeroes the momentum buffer (broadcast semantics)."""
        if reset_velocity:
            vel = GradSet.zeros(self.d_in, self.d_h, self.n_classes)
        else:
            vel = self.velocity.copy()
        return ModelParams(self.W1.copy(), self.b1.copy(), self.W2.copy(), self.b2.copy(), vel)


@dataclass
class ForwardRecord:
    """Activations of one forward pass over a batch."""

    hidden: np.ndarray  # (B, d_h) post-tanh features
    probs: np.ndarray  # (B, C) softmax rows
    logits: np.ndarray  # (B, C)


def init_params(d_in: int, d_h: int, n_classes: int, rng: np.random.Generator) -> ModelParams:
    """Gaussian init scaled by 1/sqrt(fan_in); zero biases and velocity."""
    W1 = rng.standard_normal((d_in, d_h)) / np.sqrt(d_in)
    W2 = rng.standard_normal((d_h, n_classes)) / np.sqrt(d_h)
    return ModelParams(
        W1,
        np.zeros(d_h),
        W2,
        np.zeros(n_classes),
        GradSet.zeros(d_in, d_h, n_classes),
    )


def zeros_params(d_in: int, d_h: int, n_classes: int) -> ModelParams:
    g = GradSet.zeros(d_in, d_h, n_classes)
    return ModelParams(g.W1.copy(), g.b1.copy(), g.W2.copy(), g.b2.copy(), g)


def flatten_params(params: ModelParams) -> np.ndarray:
    """Weights and biases as one vector; the momentum buffer is excluded."""
    return np.concatenate(
        [params.W1.ravel(), params.b1, params.W2.ravel(), params.b2]
    )


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax, stabilized by max subtraction."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax; always finite for finite logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def mlp_forward(params: ModelParams, X: np.ndarray) -> ForwardRecord:
    """Forward pass: hidden = tanh(X W1 + b1), probs = softmax(hidden W2 + b2)."""
    if X.ndim != 2 or X.shape[1] != params.d_in:
        raise ContractViolation(
            f"mlp_forward: X has shape {X.shape}, expected (B, {params.d_in})"
        )
    hidden = np.tanh(X @ params.W1 + params.b1)
    logits = hidden @ params.W2 + params.b2
    return ForwardRecord(hidden=hidden, probs=softmax_rows(logits), logits=logits)


def mlp_backward(
    params: ModelParams,
    X: np.ndarray,
    rec: ForwardRecord,
    d_logits: np.ndarray,
    d_hidden: np.ndarray,
) -> GradSet:
    """Exact parameter gradients for a scalar loss with the given output partials.

    d_logits is dLoss/dlogits; d_hidden is the direct dLoss/dhidden term
    (the centroid loss path), added to the classifier backprop path.
    """
    B = X.shape[0]
    if d_logits.shape != (B, params.n_classes):
        raise ContractViolation(
            f"mlp_backward: d_logits shape {d_logits.shape} != ({B}, {params.n_classes})"
        )
    if d_hidden.shape != (B, params.d_h):
        raise ContractViolation(
            f"mlp_backward: d_hidden shape {d_hidden.shape} != ({B}, {params.d_h})"
        )
    dW2 = rec.hidden.T @ d_logits
    db2 = d_logits.sum(axis=0)
    dh = d_logits @ params.W2.T + d_hidden
    dz1 = dh * (1.0 - rec.hidden**2)  # tanh'
    dW1 = X.T @ dz1
    db1 = dz1.sum(axis=0)
    return GradSet(dW1, db1, dW2, db2)


def sgd_step(
    params: ModelParams,
    grads: GradSet,
    lr: float,
    momentum: float,
    weight_decay: float,
) -> ModelParams:
    """Momentum SGD: v <- momentum*v + g + wd*w; w <- w - lr*v.

    Weight decay is not applied to biases. Returns a new ModelParams with
    the updated velocity buffer.
    """
    if lr <= 0:
        raise ContractViolation(f"sgd_step: lr must be positive, got {lr}")
    if not 0.0 <= momentum < 1.0:
        raise ContractViolation(f"sgd_step: momentum must be in [0,1), got {momentum}")
    if not grads.all_finite():
        raise TrainingDiverged("sgd_step: non-finite gradient entry")
    v = params.velocity
    vW1 = momentum * v.W1 + grads.W1 + weight_decay * params.W1
    vb1 = momentum * v.b1 + grads.b1
    vW2 = momentum * v.W2 + grads.W2 + weight_decay * params.W2
    vb2 = momentum * v.b2 + grads.b2
    return ModelParams(
        params.W1 - lr * vW1,
        params.b1 - lr * vb1,
        params.W2 - lr * vW2,
        params.b2 - lr * vb2,
        GradSet(vW1, vb1, vW2, vb2),
    )


def cosine_similarity(u: np.ndarray, v: np.ndarray) -> float:
    """u.v / (|u||v|); 0 when either vector is (numerically) zero."""
    if u.shape != v.shape:
        raise ContractViolation(
            f"cosine_similarity: shapes {u.shape} and {v.shape} differ"
        )
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu < ZERO_NORM_EPS or nv < ZERO_NORM_EPS:
        return 0.0
    return float(u @ v) / (nu * nv)
