"""Batch-ensemble layers: one shared weight, per-member rank-1 fast weights.

Member ``k`` of an affine layer realizes the weight ``W * outer(r[k], s[k])``
without ever materializing it: the input is scaled by ``r[k]``, passed
through the shared ``W``, and the output scaled by ``s[k]``.  A mini-batch
carries a member assignment (one member index per row, 0-based) so that all
members can be evaluated in a single vectorized pass.

Convolution layers generalize the same algebra: ``r`` scales input channels
before the shared kernel, ``s`` scales output channels after it.
"""

from __future__ import annotations

import numpy as np

from .autodiff import (
    RngStream,
    ShapeError,
    Tensor,
    broadcast_to,
    matmul,
    pad_constant,
    relu,
    reshape,
    take,
    transpose,
    unfold2d,
)

__all__ = [
    "MemberIndexError",
    "BatchEnsembleAffine",
    "BatchEnsembleConv",
    "BatchNorm2d",
    "MaxPool2d",
    "Flatten",
    "EnsembleStack",
    "replicate_batch",
    "split_replicated",
    "init_fast_weights",
    "parameter_counts",
]

INIT_SCHEMES = ("gaussian-around-one", "random-sign")


class MemberIndexError(IndexError):
    """Ensemble member index outside [0, n_members)."""

    def __init__(self, member: int, n_members: int):
        self.member = member
        self.n_members = n_members
        super().__init__(f"member index {member} out of range for ensemble of {n_members}")


def _activation(tag: str):
    if tag == "relu":
        return relu
    if tag == "identity":
        return lambda t: t
    raise ValueError(f"unknown activation {tag!r}")


def _check_assignment(assign, batch: int, n_members: int) -> np.ndarray:
    idx = np.asarray(assign, dtype=np.intp)
    if idx.ndim != 1 or idx.shape[0] != batch:
        raise ShapeError("member_assignment", idx.shape, (batch,))
    if idx.size and (idx.min() < 0 or idx.max() >= n_members):
        raise MemberIndexError(int(idx.max()), n_members)
    return idx


class BatchEnsembleAffine:
    """Affine layer with shared ``W[m, n]`` and per-member (r, s, bias)."""

    def __init__(self, in_dim: int, out_dim: int, n_members: int,
                 activation: str = "identity", dtype=np.float32):
        if n_members < 1:
            raise ValueError("ensemble needs at least one member")
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.n_members = n_members
        self.activation = activation
        self._act = _activation(activation)
        self.W = Tensor(np.zeros((in_dim, out_dim)), requires_grad=True, dtype=dtype)
        self.r = Tensor(np.ones((n_members, in_dim)), requires_grad=True, dtype=dtype)
        self.s = Tensor(np.ones((n_members, out_dim)), requires_grad=True, dtype=dtype)
        self.b = Tensor(np.zeros((n_members, out_dim)), requires_grad=True, dtype=dtype)

    def forward_member(self, x: Tensor, member: int) -> Tensor:
        """Single-sample pass through one member: phi((W^T (x*r)) * s + b)."""
        if not 0 <= member < self.n_members:
            raise MemberIndexError(member, self.n_members)
        if x.shape != (self.in_dim,):
            raise ShapeError("forward_member", x.shape, (self.in_dim,))
        scaled = x * self.r[member]
        y = reshape(matmul(reshape(scaled, (1, self.in_dim)), self.W), (self.out_dim,))
        return self._act(y * self.s[member] + self.b[member])

    def forward(self, X: Tensor, assign) -> Tensor:
        """Vectorized pass: row i goes through member assign[i]."""
        if X.ndim != 2 or X.shape[1] != self.in_dim:
            raise ShapeError("forward_batch", X.shape, ("B", self.in_dim))
        idx = _check_assignment(assign, X.shape[0], self.n_members)
        R = take(self.r, idx)
        S = take(self.s, idx)
        B = take(self.b, idx)
        return self._act(matmul(X * R, self.W) * S + B)

    def parameters(self):
        return [("W", self.W), ("r", self.r), ("s", self.s), ("b", self.b)]

    def buffers(self):
        return []

    def parameter_counts(self) -> tuple[int, int]:
        return self.in_dim * self.out_dim, self.in_dim + 2 * self.out_dim


class BatchEnsembleConv:
    """2-D convolution with a shared kernel and per-member channel scales.

    ``r`` scales input channels before the shared convolution and ``s``
    scales output channels after it, mirroring the affine rank-1 algebra.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel: int,
                 n_members: int, stride: int = 1, padding: int = 0,
                 activation: str = "identity", dtype=np.float32):
        if n_members < 1:
            raise ValueError("ensemble needs at least one member")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        self.n_members = n_members
        self.activation = activation
        self._act = _activation(activation)
        self.K = Tensor(np.zeros((out_channels, in_channels, kernel, kernel)),
                        requires_grad=True, dtype=dtype)
        self.r = Tensor(np.ones((n_members, in_channels)), requires_grad=True, dtype=dtype)
        self.s = Tensor(np.ones((n_members, out_channels)), requires_grad=True, dtype=dtype)
        self.b = Tensor(np.zeros((n_members, out_channels)), requires_grad=True, dtype=dtype)

    def _conv(self, x: Tensor) -> Tensor:
        b, c, h, w = x.shape
        k, st, p = self.kernel, self.stride, self.padding
        if p:
            x = pad_constant(x, ((0, 0), (0, 0), (p, p), (p, p)))
        cols = unfold2d(x, (k, k), st)  # [B, C, k, k, oh, ow]
        _, _, _, _, oh, ow = cols.shape
        ck = c * k * k
        cols = reshape(cols, (b, ck, oh * ow))
        cols = transpose(cols, (0, 2, 1))
        cols = reshape(cols, (b * oh * ow, ck))
        kmat = transpose(reshape(self.K, (self.out_channels, ck)))
        out = matmul(cols, kmat)
        out = reshape(out, (b, oh, ow, self.out_channels))
        return transpose(out, (0, 3, 1, 2))

    def forward_member(self, x: Tensor, member: int) -> Tensor:
        if not 0 <= member < self.n_members:
            raise MemberIndexError(member, self.n_members)
        if x.ndim != 3 or x.shape[0] != self.in_channels:
            raise ShapeError("forward_member", x.shape, (self.in_channels, "H", "W"))
        batched = reshape(x, (1,) + x.shape)
        out = self.forward(batched, np.array([member]))
        return reshape(out, out.shape[1:])

    def forward(self, X: Tensor, assign) -> Tensor:
        if X.ndim != 4 or X.shape[1] != self.in_channels:
            raise ShapeError("forward_batch", X.shape, ("B", self.in_channels, "H", "W"))
        idx = _check_assignment(assign, X.shape[0], self.n_members)
        R = reshape(take(self.r, idx), (X.shape[0], self.in_channels, 1, 1))
        out = self._conv(X * R)
        S = reshape(take(self.s, idx), (X.shape[0], self.out_channels, 1, 1))
        B = reshape(take(self.b, idx), (X.shape[0], self.out_channels, 1, 1))
        return self._act(out * S + B)

    def parameters(self):
        return [("K", self.K), ("r", self.r), ("s", self.s), ("b", self.b)]

    def buffers(self):
        return []

    def parameter_counts(self) -> tuple[int, int]:
        shared = self.out_channels * self.in_channels * self.kernel * self.kernel
        return shared, self.in_channels + 2 * self.out_channels


class BatchNorm2d:
    """Channel batch norm shared across ensemble members.

    Replicated batches mix all members in one pass, so a single set of
    statistics normalizes every member's activations.
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5,
                 dtype=np.float32):
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(channels), requires_grad=True, dtype=dtype)
        self.beta = Tensor(np.zeros(channels), requires_grad=True, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.training = True

    def forward(self, X: Tensor, assign=None) -> Tensor:
        if X.ndim != 4 or X.shape[1] != self.channels:
            raise ShapeError("batch_norm", X.shape, ("B", self.channels, "H", "W"))
        if self.training:
            mu = X.mean(axes=(0, 2, 3), keepdims=True)
            var = ((X - mu) ** 2).mean(axes=(0, 2, 3), keepdims=True)
            m = 1.0 - self.momentum
            self.running_mean = m * self.running_mean + self.momentum * mu.data.ravel()
            self.running_var = m * self.running_var + self.momentum * var.data.ravel()
        else:
            mu = Tensor(self.running_mean.reshape(1, -1, 1, 1))
            var = Tensor(self.running_var.reshape(1, -1, 1, 1))
        xhat = (X - mu) / ((var + self.eps) ** 0.5)
        g = reshape(self.gamma, (1, self.channels, 1, 1))
        b = reshape(self.beta, (1, self.channels, 1, 1))
        return xhat * g + b

    def parameters(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]

    def load_buffer(self, name: str, value: np.ndarray):
        setattr(self, name, value.astype(self.running_mean.dtype))

    def parameter_counts(self) -> tuple[int, int]:
        return 2 * self.channels, 0


class MaxPool2d:
    """2x2 max pooling with stride 2; odd extents are padded (ceil mode)."""

    def __init__(self, kernel: int = 2):
        self.kernel = kernel

    def forward(self, X: Tensor, assign=None) -> Tensor:
        if X.ndim != 4:
            raise ShapeError("max_pool", X.shape, ("B", "C", "H", "W"))
        k = self.kernel
        b, c, h, w = X.shape
        pad_h = (-h) % k
        pad_w = (-w) % k
        if pad_h or pad_w:
            fill = float(np.finfo(X.dtype).min) / 4
            X = pad_constant(X, ((0, 0), (0, 0), (0, pad_h), (0, pad_w)), fill)
        oh, ow = (h + pad_h) // k, (w + pad_w) // k
        tiles = reshape(X, (b, c, oh, k, ow, k))
        return tiles.max(axes=(3, 5))

    def parameters(self):
        return []

    def buffers(self):
        return []

    def parameter_counts(self) -> tuple[int, int]:
        return 0, 0


class Flatten:
    def forward(self, X: Tensor, assign=None) -> Tensor:
        return reshape(X, (X.shape[0], int(np.prod(X.shape[1:]))))

    def parameters(self):
        return []

    def buffers(self):
        return []

    def parameter_counts(self) -> tuple[int, int]:
        return 0, 0


_ENSEMBLE_TYPES = (BatchEnsembleAffine, BatchEnsembleConv)


class EnsembleStack:
    """A sequential stack of layers sharing one ensemble size."""

    def __init__(self, layers):
        self.layers = list(layers)
        members = {l.n_members for l in self.layers if isinstance(l, _ENSEMBLE_TYPES)}
        if len(members) > 1:
            raise ValueError(f"inconsistent ensemble sizes in stack: {sorted(members)}")
        self.n_members = members.pop() if members else 1
        self.training = True

    def forward(self, X: Tensor, assign) -> Tensor:
        for layer in self.layers:
            X = layer.forward(X, assign)
        return X

    def forward_member(self, x: Tensor, member: int) -> Tensor:
        for layer in self.layers:
            if isinstance(layer, _ENSEMBLE_TYPES):
                x = layer.forward_member(x, member)
            else:
                x = layer.forward(reshape(x, (1,) + x.shape))
                x = reshape(x, x.shape[1:])
        return x

    def train(self, mode: bool = True):
        self.training = mode
        for layer in self.layers:
            if hasattr(layer, "training"):
                layer.training = mode
        return self

    def eval(self):
        return self.train(False)

    def parameters(self):
        out = []
        for i, layer in enumerate(self.layers):
            out.extend((f"{i}.{name}", t) for name, t in layer.parameters())
        return out

    def buffers(self):
        out = []
        for i, layer in enumerate(self.layers):
            out.extend((f"{i}.{name}", arr) for name, arr in layer.buffers())
        return out

    def parameter_counts(self) -> tuple[int, int]:
        shared = per_member = 0
        for layer in self.layers:
            sh, pm = layer.parameter_counts()
            shared += sh
            per_member += pm
        return shared, per_member


def replicate_batch(X: Tensor, n_members: int) -> tuple[Tensor, np.ndarray]:
    """Stack ``n_members`` copies of X so every member sees the whole batch.

    Copy j is assigned wholesale to member j; rows [j*B, (j+1)*B) of the
    result belong to member j.
    """
    if n_members < 1:
        raise ValueError("n_members must be >= 1")
    batch = X.shape[0]
    if n_members == 1:
        return X, np.zeros(batch, dtype=np.intp)
    tiled = broadcast_to(reshape(X, (1,) + X.shape), (n_members,) + X.shape)
    stacked = reshape(tiled, (n_members * batch,) + X.shape[1:])
    assign = np.repeat(np.arange(n_members, dtype=np.intp), batch)
    return stacked, assign


def split_replicated(Y: Tensor, n_members: int) -> Tensor:
    """Undo replicate_batch on an output: [N_e*B, ...] -> [N_e, B, ...]."""
    total = Y.shape[0]
    if total % n_members:
        raise ShapeError("split_replicated", Y.shape, (n_members,))
    return reshape(Y, (n_members, total // n_members) + Y.shape[1:])


def init_fast_weights(layer, scheme: str, rng: RngStream):
    """Initialize shared and fast weights in place.

    ``gaussian-around-one`` draws fast weights from N(1, 0.1^2) so members
    start near the shared layer and diverge during training;
    ``random-sign`` draws them from {-1, +1}.  The shared weight always
    gets a fan-in-scaled uniform init and biases start at zero.
    """
    if scheme not in INIT_SCHEMES:
        raise ValueError(f"unknown init scheme {scheme!r}; expected one of {INIT_SCHEMES}")
    if isinstance(layer, BatchEnsembleAffine):
        shared, fan_in = layer.W, layer.in_dim
    elif isinstance(layer, BatchEnsembleConv):
        shared, fan_in = layer.K, layer.in_channels * layer.kernel * layer.kernel
    else:
        raise TypeError(f"not a batch-ensemble layer: {type(layer).__name__}")

    bound = 1.0 / np.sqrt(fan_in)
    shared.data[...] = ((rng.uniform(shared.shape) * 2 - 1) * bound).astype(shared.dtype)
    for fast in (layer.r, layer.s):
        if scheme == "gaussian-around-one":
            fast.data[...] = (1.0 + 0.1 * rng.normal(fast.shape)).astype(fast.dtype)
        else:
            fast.data[...] = np.where(rng.uniform(fast.shape) < 0.5, -1.0, 1.0).astype(fast.dtype)
    layer.b.data[...] = 0.0


def parameter_counts(layer) -> tuple[int, int]:
    """(shared, per_member) parameter counts for a layer or stack."""
    return layer.parameter_counts()
