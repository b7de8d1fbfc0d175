"""Polynomial graph filters, GNN forward/backward passes and losses.

A layer computes ``X_l = rho(sum_k S^k X_{l-1} H_lk)``.  The same coefficient
tensor runs on graphs of any size; only ``S`` changes.
"""
from __future__ import annotations

import csv
import enum
import json
import math
import struct
from dataclasses import dataclass

import numpy as np


class Activation(str, enum.Enum):
    TANH = "tanh"
    IDENTITY = "identity"
    RELU = "relu"

    def __call__(self, z):
        if self is Activation.TANH:
            return np.tanh(z)
        if self is Activation.RELU:
            return np.maximum(z, 0.0)
        return z

    def grad(self, z, out=None):
        """Derivative evaluated at the pre-activation ``z``."""
        if self is Activation.TANH:
            t = np.tanh(z) if out is None else out
            return 1.0 - t * t
        if self is Activation.RELU:
            return (z > 0).astype(float)
        return np.ones_like(z)


class LossKind(str, enum.Enum):
    HALF_MEAN_SQUARE = "half_mean_square"
    HALF_SQUARE = "half_square"


@dataclass
class ParamTensor:
    """Filter taps ``H_lk`` stored per layer as a ``(K, F_in, F_out)`` array."""

    dims: tuple
    K: int
    coeffs: list

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) < 2 or self.K < 1 or min(self.dims) < 1:
            raise ValueError("need at least one layer, K >= 1 and positive dims")
        if len(self.coeffs) != self.L:
            raise ValueError(f"expected {self.L} coefficient blocks, got {len(self.coeffs)}")
        self.coeffs = [np.asarray(c, dtype=float) for c in self.coeffs]
        for l, c in enumerate(self.coeffs):
            want = (self.K, self.dims[l], self.dims[l + 1])
            if c.shape != want:
                raise ValueError(f"layer {l} taps have shape {c.shape}, expected {want}")

    @property
    def L(self):
        return len(self.dims) - 1

    @property
    def F(self):
        """Largest feature count, the width used by the norm bounds."""
        return max(self.dims)

    @property
    def size(self):
        return sum(self.K * a * b for a, b in zip(self.dims[:-1], self.dims[1:]))

    @classmethod
    def zeros(cls, dims, K):
        dims = tuple(dims)
        return cls(dims, K, [np.zeros((K, a, b)) for a, b in zip(dims[:-1], dims[1:])])

    @classmethod
    def init(cls, dims, K, seed=0, margin=1e-3):
        """Uniform on ``[-a, a]`` with ``a = 1/(K max(F_in, F_out))``, then projected."""
        rng = np.random.default_rng(seed)
        dims = tuple(dims)
        coeffs = []
        for a, b in zip(dims[:-1], dims[1:]):
            bound = 1.0 / (K * max(a, b))
            coeffs.append(rng.uniform(-bound, bound, size=(K, a, b)))
        return project_nonamplifying(cls(dims, K, coeffs), margin)

    def flat(self):
        return np.concatenate([c.ravel() for c in self.coeffs])

    def with_flat(self, vec):
        vec = np.asarray(vec, dtype=float)
        if vec.size != self.size:
            raise ValueError("flat vector has the wrong length")
        out, start = [], 0
        for c in self.coeffs:
            out.append(vec[start:start + c.size].reshape(c.shape))
            start += c.size
        return ParamTensor(self.dims, self.K, out)

    def copy(self):
        return ParamTensor(self.dims, self.K, [c.copy() for c in self.coeffs])

    def norm(self):
        return math.sqrt(sum(float(np.sum(c * c)) for c in self.coeffs))

    def axpy(self, alpha, other):
        """Return ``self + alpha * other``."""
        return ParamTensor(self.dims, self.K,
                           [a + alpha * b for a, b in zip(self.coeffs, other.coeffs)])

    def __sub__(self, other):
        return self.axpy(-1.0, other)

    def is_finite(self):
        return all(np.all(np.isfinite(c)) for c in self.coeffs)


def filter_apply(S, X, taps):
    """``sum_k S^k X H_k`` by repeated shifting, never forming ``S^k``."""
    S = np.asarray(S, dtype=float)
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    taps = [np.atleast_2d(np.asarray(h, dtype=float)) for h in taps]
    if not taps:
        raise ValueError("need at least one tap")
    if S.shape != (X.shape[0], X.shape[0]):
        raise ValueError(f"GSO shape {S.shape} does not match {X.shape[0]} nodes")
    f_out = taps[0].shape[1]
    if any(h.shape != (X.shape[1], f_out) for h in taps):
        raise ValueError("tap shapes must all be F_in x F_out")
    z = X
    out = z @ taps[0]
    for h in taps[1:]:
        z = S @ z
        out = out + z @ h
    return out


@dataclass
class ForwardCache:
    # per layer: list of shifted inputs S^k X_{l-1}, pre-activation, output
    shifted: list
    pre: list
    post: list


def gnn_forward(params, S, X, act=Activation.TANH, readout=None):
    """Run the network; ``readout`` overrides the activation of the last layer.

    Returns ``(Y, cache)``.
    """
    S = np.asarray(S, dtype=float)
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[1] != params.dims[0]:
        raise ValueError(f"input has {X.shape[1]} features, network expects {params.dims[0]}")
    if S.shape != (X.shape[0], X.shape[0]):
        raise ValueError(f"GSO shape {S.shape} does not match {X.shape[0]} nodes")
    act = Activation(act)
    readout = act if readout is None else Activation(readout)
    shifted, pre, post = [], [], []
    x = X
    for l, H in enumerate(params.coeffs):
        zs = [x]
        for _ in range(1, params.K):
            zs.append(S @ zs[-1])
        z = zs[0] @ H[0]
        for k in range(1, params.K):
            z = z + zs[k] @ H[k]
        rho = readout if l == params.L - 1 else act
        x = rho(z)
        shifted.append(zs)
        pre.append(z)
        post.append(x)
    return x, ForwardCache(shifted, pre, post)


def gnn_backward(cache, S, dY, params, act=Activation.TANH, readout=None):
    """Gradient of ``<dY, Y>`` with respect to every tap, by reverse mode."""
    S = np.asarray(S, dtype=float)
    dY = np.asarray(dY, dtype=float)
    if dY.ndim == 1:
        dY = dY[:, None]
    if len(cache.pre) != params.L or cache.post[-1].shape != dY.shape:
        raise ValueError("forward cache does not match this network or upstream gradient")
    if S.shape != (dY.shape[0], dY.shape[0]) or cache.shifted[0][0].shape[0] != dY.shape[0]:
        raise ValueError("forward cache was built on a different graph size")
    act = Activation(act)
    readout = act if readout is None else Activation(readout)
    grads = [None] * params.L
    delta_out = dY
    for l in range(params.L - 1, -1, -1):
        rho = readout if l == params.L - 1 else act
        delta = delta_out * rho.grad(cache.pre[l], cache.post[l] if rho is Activation.TANH else None)
        zs = cache.shifted[l]
        H = params.coeffs[l]
        grads[l] = np.stack([zs[k].T @ delta for k in range(params.K)])
        if l > 0:
            # sum_k S^k delta H_k^T, Horner form (S symmetric)
            back = delta @ H[-1].T
            for k in range(params.K - 2, -1, -1):
                back = S @ back + delta @ H[k].T
            delta_out = back
    return ParamTensor(params.dims, params.K, grads)


def loss_and_grad(y, yhat, kind=LossKind.HALF_MEAN_SQUARE):
    """Loss value and its gradient with respect to ``yhat``."""
    y = np.asarray(y, dtype=float)
    yhat = np.asarray(yhat, dtype=float)
    if y.shape != yhat.shape:
        raise ValueError(f"shape mismatch {y.shape} vs {yhat.shape}")
    r = yhat - y
    if LossKind(kind) is LossKind.HALF_SQUARE:
        return 0.5 * float(np.sum(r * r)), r
    numel = max(r.size, 1)
    return float(np.sum(r * r)) / (2 * numel), r / numel


def sample_loss_grad(params, S, x, y, act=Activation.TANH, readout=None,
                     kind=LossKind.HALF_MEAN_SQUARE):
    """Loss and parameter gradient for one ``(S, x, y)`` sample."""
    y = np.asarray(y, dtype=float)
    yhat, cache = gnn_forward(params, S, x, act, readout)
    if y.ndim == 1:
        y = y[:, None]
    value, d = loss_and_grad(y, yhat, kind)
    return value, gnn_backward(cache, S, d, params, act, readout)


def spectral_response(taps, lam):
    """Frequency response ``sum_k h_k lam^k`` by Horner's rule."""
    out = 0.0
    for h in reversed(list(taps)):
        out = out * lam + h
    return out


def project_nonamplifying(params, margin=1e-3):
    """Rescale each input-output filter so its taps' 1-norm is at most ``1 - margin``.

    For ``|lam| <= 1`` this gives ``|h(lam)| <= 1 - margin``.
    """
    if not 0.0 < margin < 1.0:
        raise ValueError("margin must lie in (0, 1)")
    limit = 1.0 - margin
    out = []
    for H in params.coeffs:
        s = np.sum(np.abs(H), axis=0)
        scale = np.where(s > limit, limit / np.where(s > 0, s, 1.0), 1.0)
        out.append(H * scale[None, :, :])
    return ParamTensor(params.dims, params.K, out)


def grad_norm_bound(L, F, K):
    """Upper bound ``F^(2L) sqrt(K)`` on the norm of the network's parameter gradient."""
    if min(L, F, K) < 1:
        raise ValueError("L, F, K must be >= 1")
    return float(F ** (2 * L)) * math.sqrt(K)


def output_jacobian(params, S, X, act=Activation.TANH, readout=None):
    """Jacobian of the flattened output with respect to the flattened taps.

    One reverse pass per output entry; fine for the small graphs it is used on.
    """
    Y, cache = gnn_forward(params, S, X, act, readout)
    rows = []
    for idx in range(Y.size):
        e = np.zeros(Y.size)
        e[idx] = 1.0
        rows.append(gnn_backward(cache, S, e.reshape(Y.shape), params, act, readout).flat())
    return np.array(rows)


# -- serialization ------------------------------------------------------------

_MAGIC = b"GGNNPT01"


def save_params(path, params, activation=Activation.TANH, seed=None, extra=None):
    """Binary container: magic, u64 header length, JSON header, float64 taps.

    Taps are written row-major for each ``H_lk`` in ``(l, k)`` order.
    """
    header = {"L": params.L, "K": params.K, "dims": list(params.dims),
              "activation": Activation(activation).value, "seed": seed}
    if extra:
        header.update(extra)
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(params.flat().astype("<f8").tobytes())


def load_params(path):
    """Inverse of :func:`save_params`; returns ``(params, header)``."""
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path} is not a parameter container")
        (size,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(size))
        data = np.frombuffer(fh.read(), dtype="<f8").astype(float)
    params = ParamTensor.zeros(header["dims"], header["K"])
    if header["L"] != params.L:
        raise ValueError("header layer count disagrees with dims")
    return params.with_flat(data), header


def export_params_csv(path, params):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "tap", "row", "col", "value"])
        for l, H in enumerate(params.coeffs):
            for k in range(params.K):
                for i in range(H.shape[1]):
                    for j in range(H.shape[2]):
                        w.writerow([l, k, i, j, repr(float(H[k, i, j]))])
