"""Graphons, graph sampling, induced step objects and the bound constants.

Graphs sampled here always use the shift operator ``S = A / n``.  Nodes sit at
the left grid points ``u_i = (i - 1) / n``.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FAMILIES = ("constant", "product", "additive", "exp_distance", "grid")


def _check_unit(*values):
    for value in values:
        arr = np.asarray(value, dtype=float)
        if np.any(arr < 0.0) or np.any(arr > 1.0) or np.any(~np.isfinite(arr)):
            raise ValueError(f"graphon arguments must lie in [0, 1], got {value!r}")


@dataclass(frozen=True)
class Graphon:
    """A symmetric kernel ``W: [0,1]^2 -> [0,1]`` from one of a few families.

    ``params`` holds the family parameters: ``p`` for ``constant``, ``beta``
    for ``exp_distance`` and ``table`` (an m x m nested list) for ``grid``.
    """

    family: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown graphon family {self.family!r}")
        if self.family == "constant":
            p = float(self.params.get("p", math.nan))
            if not 0.0 <= p <= 1.0:
                raise ValueError("constant graphon needs 0 <= p <= 1")
        elif self.family == "exp_distance":
            beta = float(self.params.get("beta", math.nan))
            if not beta >= 0.0:
                raise ValueError("exp_distance graphon needs beta >= 0")
        elif self.family == "grid":
            table = np.asarray(self.params.get("table"), dtype=float)
            if table.ndim != 2 or table.shape[0] != table.shape[1] or table.shape[0] < 2:
                raise ValueError("grid graphon needs an m x m table with m >= 2")
            if not np.array_equal(table, table.T):
                raise ValueError("grid graphon table must be symmetric")
            if table.min() < 0.0 or table.max() > 1.0:
                raise ValueError("grid graphon table entries must lie in [0, 1]")
            object.__setattr__(self, "_table", table)
        unknown = set(self.params) - set(_PARAM_KEYS[self.family])
        if unknown:
            raise ValueError(f"unknown parameter(s) for {self.family}: {sorted(unknown)}")

    # -- construction helpers -------------------------------------------------
    @classmethod
    def constant(cls, p):
        return cls("constant", {"p": float(p)})

    @classmethod
    def product(cls):
        return cls("product")

    @classmethod
    def additive(cls):
        return cls("additive")

    @classmethod
    def exp_distance(cls, beta):
        return cls("exp_distance", {"beta": float(beta)})

    @classmethod
    def grid(cls, table):
        return cls("grid", {"table": np.asarray(table, dtype=float).tolist()})

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        family = d.pop("family", None)
        params = dict(d.pop("params", {}) or {})
        if d:
            raise ValueError(f"unknown graphon key(s): {sorted(d)}")
        if family == "grid" and "csv" in params:
            params["table"] = load_grid_table(params.pop("csv")).tolist()
        return cls(family, params)

    def to_dict(self):
        return {"family": self.family, "params": dict(self.params)}

    # -- evaluation -----------------------------------------------------------
    @property
    def lipschitz(self):
        """Declared constant A with |W(u,v) - W(u',v')| <= A(|u-u'| + |v-v'|)."""
        if self.family == "constant":
            return 0.0
        if self.family == "product":
            return 1.0
        if self.family == "additive":
            return 0.5
        if self.family == "exp_distance":
            return float(self.params["beta"])
        table = self._table
        m = table.shape[0]
        slope = max(np.abs(np.diff(table, axis=0)).max(), np.abs(np.diff(table, axis=1)).max())
        return float(slope * (m - 1))

    def __call__(self, u, v):
        """Vectorised evaluation; ``u`` and ``v`` broadcast against each other."""
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        if self.family == "constant":
            return np.full(np.broadcast(u, v).shape, float(self.params["p"]))
        if self.family == "product":
            return u * v
        if self.family == "additive":
            return 0.5 * (u + v)
        if self.family == "exp_distance":
            return np.exp(-float(self.params["beta"]) * np.abs(u - v))
        # symmetrised so floating-point rounding cannot break W(u,v) == W(v,u)
        return 0.5 * (_bilinear(self._table, u, v) + _bilinear(self._table, v, u))


_PARAM_KEYS = {
    "constant": ("p",),
    "product": (),
    "additive": (),
    "exp_distance": ("beta",),
    "grid": ("table",),
}


def _bilinear(table, u, v):
    m = table.shape[0]
    x = np.clip(u, 0.0, 1.0) * (m - 1)
    y = np.clip(v, 0.0, 1.0) * (m - 1)
    i0 = np.minimum(np.floor(x).astype(int), m - 2)
    j0 = np.minimum(np.floor(y).astype(int), m - 2)
    tx = x - i0
    ty = y - j0
    return (
        table[i0, j0] * (1 - tx) * (1 - ty)
        + table[i0 + 1, j0] * tx * (1 - ty)
        + table[i0, j0 + 1] * (1 - tx) * ty
        + table[i0 + 1, j0 + 1] * tx * ty
    )


def load_grid_table(path):
    """Read an m x m table from a header-less, comma-separated file."""
    with open(path, newline="") as fh:
        rows = [[float(x) for x in row] for row in csv.reader(fh) if row]
    return np.asarray(rows, dtype=float)


def load_graphon(path):
    return Graphon.from_dict(json.loads(Path(path).read_text()))


def evaluate(graphon, u, v):
    """Scalar evaluation with domain checking."""
    _check_unit(u, v)
    return float(graphon(u, v))


# -- graphs -------------------------------------------------------------------

@dataclass
class SampledGraph:
    adjacency: np.ndarray
    kind: str = "stochastic"

    def __post_init__(self):
        a = np.asarray(self.adjacency, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError("adjacency must be square")
        if self.kind not in ("template", "stochastic"):
            raise ValueError(f"unknown graph kind {self.kind!r}")
        self.adjacency = a

    @property
    def n(self):
        return self.adjacency.shape[0]

    def gso(self):
        return self.adjacency / self.n


def grid_points(n):
    return np.arange(n) / n


def template_graph(graphon, n):
    """Weighted template graph with entries ``W(u_i, u_j)`` and zero diagonal."""
    if n < 1:
        raise ValueError("template graph needs n >= 1")
    u = grid_points(n)
    a = graphon(u[:, None], u[None, :])
    np.fill_diagonal(a, 0.0)
    return SampledGraph(a, "template")


def sample_stochastic(template, seed):
    """Bernoulli graph drawn from a template; only i < j is drawn, then mirrored."""
    if template.kind != "template":
        raise ValueError("sample_stochastic expects a template graph")
    rng = np.random.default_rng(seed)
    n = template.n
    iu = np.triu_indices(n, k=1)
    draws = rng.random(len(iu[0])) < template.adjacency[iu]
    a = np.zeros((n, n))
    a[iu] = draws
    a = a + a.T
    return SampledGraph(a, "stochastic")


def sample_graph(graphon, n, seed):
    return sample_stochastic(template_graph(graphon, n), seed)


# -- step objects -------------------------------------------------------------

@dataclass
class StepGraphon:
    """Piecewise-constant graphon on the blocks ``I_i x I_j``."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2 or self.values.shape[0] != self.values.shape[1]:
            raise ValueError("step graphon values must be square")

    @property
    def n(self):
        return self.values.shape[0]

    def __call__(self, u, v):
        i = _block(u, self.n)
        j = _block(v, self.n)
        return self.values[i, j]


def _block(u, n):
    return np.minimum((np.asarray(u, dtype=float) * n).astype(int), n - 1)


def induced_step(graph):
    return StepGraphon(graph.adjacency.copy())


def template_step(graphon, n):
    """Step graphon of the template graph, diagonal blocks included.

    This is the object whose L2 distance to ``graphon`` is at most ``2/n``
    for normalized Lipschitz graphons; the zero-diagonal ``template_graph``
    misses the diagonal blocks and only satisfies an O(1/sqrt(n)) bound.
    """
    u = grid_points(n)
    return StepGraphon(graphon(u[:, None], u[None, :]))


@dataclass(frozen=True)
class GraphonSignal:
    """Signal on [0, 1]: a closed-form family or a step signal.

    Families: ``linear`` (X(u) = u), ``sine`` (X(u) = sin(pi u) / pi) and
    ``constant`` (X(u) = value).  All are normalized Lipschitz.
    """

    family: str
    value: float = 0.0
    steps: tuple = ()

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        if self.family == "linear":
            return u.copy()
        if self.family == "sine":
            return np.sin(np.pi * u) / np.pi
        if self.family == "constant":
            return np.full(u.shape, float(self.value))
        if self.family == "step":
            vals = np.asarray(self.steps, dtype=float)
            return vals[_block(u, len(vals))]
        raise ValueError(f"unknown signal family {self.family!r}")

    @property
    def blocks(self):
        return len(self.steps) if self.family == "step" else None

    def sample(self, n):
        """Graph signal ``[x_n]_i = X(u_i)``."""
        return self(grid_points(n))


def induced_step_signal(values):
    return GraphonSignal("step", steps=tuple(float(x) for x in np.ravel(values)))


# -- distances ----------------------------------------------------------------

def _refine(grid_m, blocks):
    blocks = [b for b in blocks if b]
    if not blocks:
        return grid_m
    base = math.lcm(*blocks)
    return base * max(1, -(-grid_m // base))


def l2_graphon_distance(a, b, grid_m=1024):
    """Midpoint-rule estimate of ``||a - b||_{L2([0,1]^2)}``.

    The grid is refined to a multiple of the block counts of step inputs so
    that no midpoint straddles a block boundary.
    """
    if grid_m < 2:
        raise ValueError("grid_m must be >= 2")
    blocks = [g.n for g in (a, b) if isinstance(g, StepGraphon)]
    m = _refine(grid_m, blocks)
    x = (np.arange(m) + 0.5) / m
    total = 0.0
    # row chunks keep memory bounded for large grids
    chunk = max(1, 2**22 // m)
    for start in range(0, m, chunk):
        uu = x[start:start + chunk, None]
        diff = a(uu, x[None, :]) - b(uu, x[None, :])
        total += float(np.sum(diff * diff))
    return math.sqrt(total / (m * m))


def l2_signal_distance(a, b, grid_m=4096):
    if grid_m < 2:
        raise ValueError("grid_m must be >= 2")
    m = _refine(grid_m, [s.blocks for s in (a, b)])
    x = (np.arange(m) + 0.5) / m
    diff = a(x) - b(x)
    return math.sqrt(float(np.mean(diff * diff)))


# -- spectra ------------------------------------------------------------------

@dataclass
class SpectralSummary:
    eigenvalues: np.ndarray
    c: float
    band_cardinality: int
    eigenvalue_margin: float | None = None
    eigenvectors: np.ndarray | None = None


def _sym_eig(mat):
    mat = np.asarray(mat, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ValueError("operator must be a square matrix")
    if not np.allclose(mat, mat.T, atol=1e-12, rtol=0.0):
        raise ValueError("operator must be symmetric")
    w, v = np.linalg.eigh(mat)
    order = np.argsort(w)[::-1]
    return w[order], v[:, order]


def spectral_summary(gso_a, gso_b=None, c=0.1, with_vectors=False):
    """Band cardinality and eigenvalue margin of one or two shift operators.

    The band counts eigenvalues with ``|lambda| >= c`` of ``gso_b`` (or of
    ``gso_a`` when only one operator is given).  The margin pairs the two
    spectra by index after a descending sort and, for every ``i`` in the band,
    takes the distance from ``lambda_i(B)`` to the nearest ``lambda_j(A)``
    with ``j != i``.
    """
    if not 0.0 < c <= 1.0:
        raise ValueError("c must lie in (0, 1]")
    lam_a, vec_a = _sym_eig(gso_a)
    if gso_b is None:
        band = int(np.sum(np.abs(lam_a) >= c))
        return SpectralSummary(lam_a, c, band, None, vec_a if with_vectors else None)
    lam_b, vec_b = _sym_eig(gso_b)
    band_idx = np.flatnonzero(np.abs(lam_b) >= c)
    margin = math.inf
    for i in band_idx:
        gaps = np.abs(lam_b[i] - lam_a)
        gaps[i] = math.inf
        if len(lam_a) > 1:
            margin = min(margin, float(gaps.min()))
    return SpectralSummary(lam_b, c, len(band_idx), margin, vec_b if with_vectors else None)


# -- constants ----------------------------------------------------------------

def gamma_constant(L, F, K):
    """Nontransferable-term constant ``12 sqrt(K F^(L-1)) L^2 F^(2L-2)``."""
    if min(L, F, K) < 1:
        raise ValueError("L, F, K must be >= 1")
    return 12.0 * math.sqrt(K * F ** (L - 1)) * L**2 * F ** (2 * L - 2)


def max_degree(graphon, grid_m=1024):
    x = (np.arange(grid_m) + 0.5) / grid_m
    return float(np.max(np.mean(graphon(x[:, None], x[None, :]), axis=0)))


def as5_check(graphon, n, xi, grid_m=1024):
    """Check the graph-size condition ``n - log(2n/xi)/d_W > 2/d_W``."""
    if not 0.0 < xi < 1.0:
        raise ValueError("xi must lie in (0, 1)")
    if grid_m < 16:
        raise ValueError("grid_m must be >= 16")
    d_w = max_degree(graphon, grid_m)
    if d_w <= 0.0:
        return {"holds": False, "d_w": d_w, "degenerate": True}
    holds = n - math.log(2 * n / xi) / d_w > 2.0 / d_w
    return {"holds": bool(holds), "d_w": d_w, "degenerate": False}
