"""Training objective: classification + entropy regularizer + gradient penalty.

Per ensemble member the loss is

    L = L_cls + lambda1 * sum_c R_c + lambda2 * L_gp

where L_cls is a per-class binary cross entropy on the kernel values
exp(-distance), R_c penalizes class-feature clouds whose estimated
differential entropy falls below that of the member's in-batch data
features for class c, and L_gp is a two-sided gradient penalty pushing
the input-gradient norm of the summed kernels toward 1.  The model loss
averages the member losses.

Entropy is estimated with the k-nearest-neighbour estimator
(digamma(N) - digamma(k) + log V_d + d/N * sum_i log rho_i, with V_d the
Euclidean unit-ball volume and rho_i the distance from sample i to its
k-th neighbour).  The estimate is differentiable through the realized
neighbour distances.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import digamma, gammaln

from .autodiff import RngStream, Tensor, clamp, exp, grad, log, reshape, take
from .model import BeSnnModel

__all__ = [
    "RegularizerConfig",
    "LossBreakdown",
    "NonOneHotError",
    "InsufficientSamplesError",
    "classification_loss",
    "knn_entropy",
    "entropy_regularizer",
    "gradient_penalty",
    "total_loss",
]

# squared-distance floor before log; keeps duplicated samples finite while
# still yielding a harsh collapse penalty
_RHO_SQ_FLOOR = 1e-24


class NonOneHotError(ValueError):
    """A label row is not a one-hot vector."""


class InsufficientSamplesError(ValueError):
    """Too few samples for a k-nearest-neighbour entropy estimate."""

    def __init__(self, n: int, k: int):
        self.n = n
        self.k = k
        super().__init__(f"insufficient samples for entropy estimate: n={n} needs n > k={k}")


@dataclass
class RegularizerConfig:
    """Loss coefficients; defaults follow the reference protocol."""

    lambda_entropy: float = 1.0
    lambda_gradient: float = 0.5
    knn_k: int = 3
    prob_clamp: float = 1e-7

    def __post_init__(self):
        if self.lambda_entropy < 0 or self.lambda_gradient < 0:
            raise ValueError("loss coefficients must be non-negative")


@dataclass
class LossBreakdown:
    """Scalar diagnostics plus the differentiable total (``node``)."""

    cls: float
    entropy_reg: float
    gp: float
    total: float
    per_member_totals: np.ndarray
    node: Tensor = field(repr=False, default=None)


def classification_loss(y_tilde: Tensor, y_onehot: np.ndarray,
                        prob_clamp: float = 1e-7) -> Tensor:
    """Mean per-class binary cross entropy between kernels and one-hot labels.

    ``y_tilde`` holds exp(-distance) values in (0, 1]; they are clamped to
    [prob_clamp, 1 - prob_clamp] so the loss stays finite.
    """
    y = np.asarray(y_onehot)
    if y.shape != y_tilde.shape:
        from .autodiff import ShapeError

        raise ShapeError("classification_loss", y_tilde.shape, y.shape)
    rows_ok = np.all(np.isin(y, (0.0, 1.0))) and np.all(y.sum(axis=-1) == 1.0)
    if not rows_ok:
        raise NonOneHotError("labels must be one-hot rows of exactly one 1")
    p = clamp(y_tilde, prob_clamp, 1.0 - prob_clamp)
    yt = Tensor(y.astype(p.dtype))
    per_sample = -(yt * log(p) + (1.0 - yt) * log(1.0 - p)).sum(axes=-1)
    return per_sample.mean()


def _log_unit_ball_volume(d: int) -> float:
    return 0.5 * d * np.log(np.pi) - gammaln(0.5 * d + 1.0)


def knn_entropy(samples, k: int = 3) -> Tensor:
    """k-nearest-neighbour differential entropy estimate in nats.

    Differentiable w.r.t. ``samples`` when given a graph tensor: the
    gradient flows through each realized k-th-neighbour distance to the
    pair of points attaining it.  Duplicate points are floored at distance
    1e-12 rather than producing -inf.
    """
    x = samples if isinstance(samples, Tensor) else Tensor(np.asarray(samples, dtype=np.float64))
    if x.ndim != 2:
        from .autodiff import ShapeError

        raise ShapeError("knn_entropy", x.shape, ("N", "d"))
    n, d = x.shape
    if n <= k:
        raise InsufficientSamplesError(n, k)

    _, idx = cKDTree(x.data).query(x.data, k=k + 1)
    neighbor = idx[:, k].astype(np.intp)  # k-th neighbour (query point itself is idx 0)

    diff = x - take(x, neighbor)
    rho_sq = clamp((diff * diff).sum(axes=1), _RHO_SQ_FLOOR, None)
    log_rho_sum = 0.5 * log(rho_sq).sum()
    const = float(digamma(n) - digamma(k) + _log_unit_ball_volume(d))
    return log_rho_sum * (d / n) + const


def entropy_regularizer(class_features: Tensor, data_features_c, k: int = 3) -> Tensor:
    """Entropy shortfall of a class-feature cloud against its data features.

    Returns max(0, H_data - H_class).  The data-feature entropy acts as a
    constant threshold (no gradient flows into it); classes with at most k
    data samples in the batch contribute 0.
    """
    data = data_features_c.data if isinstance(data_features_c, Tensor) else np.asarray(data_features_c)
    if data.shape[0] <= k:
        return Tensor(np.zeros((), dtype=class_features.dtype))
    with np.errstate(all="ignore"):
        threshold = knn_entropy(data, k).item()
    return (threshold - knn_entropy(class_features, k)).relu()


def gradient_penalty(model_forward, X: Tensor) -> Tensor:
    """Mean over the batch of (||d(sum_c y_c)/dx||^2 - 1)^2.

    ``model_forward`` maps a [B, ...] input tensor to kernel values
    [B, C].  The input gradient is obtained with a differentiable backward
    pass, so the returned scalar can itself be differentiated w.r.t. the
    model parameters.
    """
    x = Tensor(X.data.copy(), requires_grad=True, dtype=X.dtype)
    y = model_forward(x)
    (gx,) = grad(y.sum(), [x], create_graph=True)
    flat = reshape(gx, (x.shape[0], -1))
    norm_sq = (flat * flat).sum(axes=1)
    return ((norm_sq - 1.0) ** 2).mean()


def _penalty_from_input_grad(gx: Tensor) -> Tensor:
    flat = reshape(gx, (gx.shape[0], -1))
    norm_sq = (flat * flat).sum(axes=1)
    return (norm_sq - 1.0) ** 2  # per-row, caller averages


def total_loss(model: BeSnnModel, X, labels, config: RegularizerConfig,
               rng: RngStream) -> LossBreakdown:
    """Full training loss of a mini-batch, averaged across ensemble members.

    The batch is replicated so every member sees every sample; one shared
    draw of class features serves the classification term, the entropy
    regularizer, and the gradient penalty.
    """
    x_data = X.data if isinstance(X, Tensor) else np.asarray(X, dtype=np.float32)
    labels = np.asarray(labels)
    batch = x_data.shape[0]
    ne, c = model.n_members, model.class_count

    reps = np.tile(x_data, (ne,) + (1,) * (x_data.ndim - 1))
    need_input_grad = config.lambda_gradient > 0
    x_rep = Tensor(reps, requires_grad=need_input_grad)
    assign = np.repeat(np.arange(ne, dtype=np.intp), batch)

    features = model.sample_class_features(rng)
    phi = model.member_features_from_replicated(x_rep, assign)  # [N_e, B, d]
    dbar = model.distances_from_member_features(phi, features)  # [B, N_e, C]
    y_tilde = exp(-dbar)

    onehot = np.eye(c, dtype=np.float64)[labels]
    class_rows = [np.flatnonzero(labels == cls) for cls in range(c)]

    if need_input_grad:
        (gx,) = grad(y_tilde.sum(), [x_rep], create_graph=True)
        penalty_rows = _penalty_from_input_grad(gx)  # [N_e * B]

    member_totals = []
    cls_terms, reg_terms, gp_terms = [], [], []
    for k in range(ne):
        cls_k = classification_loss(y_tilde[:, k, :], onehot, config.prob_clamp)

        reg_k = Tensor(np.zeros((), dtype=dbar.dtype))
        if config.lambda_entropy > 0:
            phi_k = phi[k].data  # threshold side is constant
            for cls in range(c):
                reg_k = reg_k + entropy_regularizer(
                    features.features[k, cls], phi_k[class_rows[cls]], config.knn_k
                )

        if need_input_grad:
            gp_k = penalty_rows[k * batch : (k + 1) * batch].mean()
        else:
            gp_k = Tensor(np.zeros((), dtype=dbar.dtype))

        member_totals.append(cls_k + config.lambda_entropy * reg_k
                             + config.lambda_gradient * gp_k)
        cls_terms.append(cls_k.item())
        reg_terms.append(reg_k.item())
        gp_terms.append(gp_k.item())

    total = member_totals[0]
    for t in member_totals[1:]:
        total = total + t
    total = total * (1.0 / ne)

    return LossBreakdown(
        cls=float(np.mean(cls_terms)),
        entropy_reg=float(np.mean(reg_terms)),
        gp=float(np.mean(gp_terms)),
        total=total.item(),
        per_member_totals=np.array([t.item() for t in member_totals]),
        node=total,
    )
