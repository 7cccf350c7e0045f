"""Distance-kernel classifier over stochastic class features.

The model pairs a data feature extractor with a class-feature generator.
The generator maps a one-hot class label concatenated with Gaussian noise
to a feature vector; drawing M noise vectors per class yields an empirical
cloud representing that class in feature space.  Classification picks the
class whose cloud is nearest (in average squared Euclidean distance) to
the extracted input features, i.e. the class with the largest kernel value
exp(-distance).

Both networks are built from batch-ensemble layers so the whole model is
an implicit ensemble; predictions average kernel values across members.
Distance matrices are laid out [batch, member, class].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import RngStream, ShapeError, Tensor, reshape, transpose
from .layers import (
    BatchEnsembleAffine,
    BatchEnsembleConv,
    BatchNorm2d,
    EnsembleStack,
    Flatten,
    MaxPool2d,
    init_fast_weights,
    replicate_batch,
    split_replicated,
)

__all__ = [
    "ClassFeatureSet",
    "BeSnnModel",
    "predict_member",
    "predict_ensemble",
    "build_architecture",
    "ARCHITECTURES",
]

ARCHITECTURES = ("two-moons-mlp", "fmnist-conv")


@dataclass
class ClassFeatureSet:
    """Generated class features [n_members, n_classes, m_per_class, feature_dim]."""

    features: Tensor
    noise_position: int  # rng position before the draw, for exact replay

    @property
    def shape(self):
        return self.features.shape


class _Relu:
    def forward(self, X: Tensor, assign=None) -> Tensor:
        return X.relu()

    def parameters(self):
        return []

    def buffers(self):
        return []

    def parameter_counts(self):
        return 0, 0


class BeSnnModel:
    """Feature extractor + class-feature generator with shared ensemble size."""

    def __init__(self, extractor: EnsembleStack, generator: EnsembleStack,
                 class_count: int, feature_dim: int, noise_dim: int,
                 m_per_class: int, input_shape: tuple[int, ...]):
        gen_first = next(
            (l for l in generator.layers if isinstance(l, BatchEnsembleAffine)), None
        )
        if gen_first is None:
            raise ValueError("generator must start with a batch-ensemble affine layer")
        if gen_first.in_dim != class_count + noise_dim:
            raise ShapeError(
                "generator_input", (gen_first.in_dim,), (class_count + noise_dim,)
            )
        if extractor.n_members != generator.n_members:
            raise ValueError(
                f"extractor has {extractor.n_members} members, "
                f"generator has {generator.n_members}"
            )
        self.extractor = extractor
        self.generator = generator
        self.class_count = class_count
        self.feature_dim = feature_dim
        self.noise_dim = noise_dim
        self.m_per_class = m_per_class
        self.n_members = extractor.n_members
        self.input_shape = tuple(input_shape)

    # -- bookkeeping ---------------------------------------------------------

    def parameters(self):
        out = [(f"extractor.{n}", t) for n, t in self.extractor.parameters()]
        out += [(f"generator.{n}", t) for n, t in self.generator.parameters()]
        return out

    def buffers(self):
        out = [(f"extractor.{n}", a) for n, a in self.extractor.buffers()]
        out += [(f"generator.{n}", a) for n, a in self.generator.buffers()]
        return out

    def train(self, mode: bool = True):
        self.extractor.train(mode)
        self.generator.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def parameter_counts(self) -> tuple[int, int]:
        se, pe = self.extractor.parameter_counts()
        sg, pg = self.generator.parameter_counts()
        return se + sg, pe + pg

    # -- forward paths ---------------------------------------------------------

    def sample_class_features(self, rng: RngStream) -> ClassFeatureSet:
        """Draw M feature vectors per class from every member's generator.

        One fresh noise vector per (class, m) pair; the same noise feeds
        every member (members differ through their fast weights only).
        """
        c, m, dn = self.class_count, self.m_per_class, self.noise_dim
        position = rng.position
        labels = np.repeat(np.eye(c), m, axis=0)  # [C*M, C], class-major
        noise = rng.normal((c * m, dn), dtype=np.float32)
        inputs = Tensor(np.concatenate([labels, noise], axis=1).astype(np.float32))
        rep, assign = replicate_batch(inputs, self.n_members)
        raw = self.generator.forward(rep, assign)
        feats = split_replicated(raw, self.n_members)  # [N_e, C*M, d]
        feats = reshape(feats, (self.n_members, c, m, self.feature_dim))
        return ClassFeatureSet(features=feats, noise_position=position)

    def extract_features(self, X: Tensor) -> Tensor:
        """Per-member features of a batch: [n_members, B, feature_dim]."""
        rep, assign = replicate_batch(X, self.n_members)
        return self.member_features_from_replicated(rep, assign)

    def member_features_from_replicated(self, x_rep: Tensor, assign) -> Tensor:
        """Features of an already-replicated batch, split per member."""
        return split_replicated(self.extractor.forward(x_rep, assign), self.n_members)

    def distances_from_member_features(self, phi: Tensor,
                                       features: ClassFeatureSet) -> Tensor:
        """Distances from per-member features [N_e, B, d] to class features."""
        e = features.features
        if e.shape != (self.n_members, self.class_count, self.m_per_class, self.feature_dim):
            raise ShapeError("class_features", e.shape,
                             (self.n_members, self.class_count, self.m_per_class,
                              self.feature_dim))
        phi = reshape(phi, (self.n_members, phi.shape[1], 1, 1, self.feature_dim))
        e = reshape(e, (self.n_members, 1, self.class_count, self.m_per_class,
                        self.feature_dim))
        diff = phi - e
        dist = (diff * diff).sum(axes=4).mean(axes=3)  # [N_e, B, C]
        return transpose(dist, (1, 0, 2))

    def class_distances(self, X: Tensor, features: ClassFeatureSet) -> Tensor:
        """Average squared Euclidean distances, [B, n_members, n_classes].

        entry [b, k, c] = mean over m of ||phi_k(x_b) - e_{k,c,m}||^2;
        differentiable w.r.t. network parameters and X.
        """
        return self.distances_from_member_features(self.extract_features(X), features)

    def distances(self, X: Tensor, rng: RngStream) -> Tensor:
        """Convenience: fresh class features + distances in one call."""
        return self.class_distances(X, self.sample_class_features(rng))


def predict_member(distances: Tensor, member: int) -> np.ndarray:
    """Predicted class per row for one member: argmax of exp(-d), i.e. argmin d.

    Ties break toward the smallest class index.
    """
    d = distances.data if isinstance(distances, Tensor) else np.asarray(distances)
    if not 0 <= member < d.shape[1]:
        from .layers import MemberIndexError

        raise MemberIndexError(member, d.shape[1])
    return np.argmin(d[:, member, :], axis=1)


def predict_ensemble(distances: Tensor) -> np.ndarray:
    """Predicted class per row: argmax of the member-averaged kernel exp(-d).

    Ties break toward the smallest class index.
    """
    d = distances.data if isinstance(distances, Tensor) else np.asarray(distances)
    kernels = np.exp(-d).mean(axis=1)  # [B, C]
    return np.argmax(kernels, axis=1)


def _mlp(dims, n_members, dtype):
    layers = []
    for i, (m, n) in enumerate(zip(dims[:-1], dims[1:])):
        act = "relu" if i < len(dims) - 2 else "identity"
        layers.append(BatchEnsembleAffine(m, n, n_members, activation=act, dtype=dtype))
    return EnsembleStack(layers)


def _conv_block(c_in, c_out, n_members, dtype):
    return [
        BatchEnsembleConv(c_in, c_out, 3, n_members, activation="identity", dtype=dtype),
        BatchNorm2d(c_out, dtype=dtype),
        _Relu(),
        MaxPool2d(2),
    ]


def build_architecture(name: str, n_members: int = 4, m_per_class: int = 16,
                       rng: RngStream | None = None,
                       init_scheme: str = "gaussian-around-one",
                       dtype=np.float32) -> BeSnnModel:
    """Construct one of the named architectures with initialized weights.

    ``two-moons-mlp``: 2-d inputs, 32-d features, 8-d generator noise.
    ``fmnist-conv``: 28x28 single-channel inputs through three conv/pool
    blocks (64/128/128 channels) into 256-d features, 512-d noise.
    """
    rng = rng or RngStream(0)
    if name == "two-moons-mlp":
        extractor = _mlp([2, 32, 32, 32], n_members, dtype)
        generator = _mlp([2 + 8, 32, 32], n_members, dtype)
        model = BeSnnModel(extractor, generator, class_count=2, feature_dim=32,
                           noise_dim=8, m_per_class=m_per_class, input_shape=(2,))
    elif name == "fmnist-conv":
        layers = []
        layers += _conv_block(1, 64, n_members, dtype)
        layers += _conv_block(64, 128, n_members, dtype)
        layers += _conv_block(128, 128, n_members, dtype)
        layers.append(Flatten())
        layers.append(BatchEnsembleAffine(512, 256, n_members, activation="relu", dtype=dtype))
        layers.append(BatchEnsembleAffine(256, 256, n_members, activation="identity", dtype=dtype))
        extractor = EnsembleStack(layers)
        generator = _mlp([10 + 512, 512, 256], n_members, dtype)
        model = BeSnnModel(extractor, generator, class_count=10, feature_dim=256,
                           noise_dim=512, m_per_class=m_per_class,
                           input_shape=(1, 28, 28))
    else:
        raise ValueError(f"unknown architecture {name!r}; expected one of {ARCHITECTURES}")

    for stack in (model.extractor, model.generator):
        for layer in stack.layers:
            if isinstance(layer, (BatchEnsembleAffine, BatchEnsembleConv)):
                init_fast_weights(layer, init_scheme, rng)
    return model
