"""SGD on growing graphs, gradient-distance estimates and teacher-student data.

Randomness is always derived from a master seed plus integer indices, so the
result of any trial or epoch does not depend on evaluation order.
"""
from __future__ import annotations

import csv
import logging
import math
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from .gnn import Activation, LossKind, ParamTensor, gnn_forward, sample_loss_grad
from .graphon import GraphonSignal, gamma_constant, grid_points, sample_graph

log = logging.getLogger(__name__)


def derive(seed, *index):
    """Seed material for ``np.random.default_rng`` from a master seed and indices.

    ``seed`` may itself be derived material (a list), which is extended.
    """
    base = [int(s) for s in seed] if isinstance(seed, (list, tuple)) else [int(seed)]
    return base + [int(i) for i in index]


class TrainingError(RuntimeError):
    def __init__(self, message, sample_index=None):
        super().__init__(message)
        self.sample_index = sample_index


# -- configuration --------------------------------------------------------------

@dataclass(frozen=True)
class FixedIncrement:
    delta: int = 10

    def __post_init__(self):
        if self.delta < 0:
            raise ValueError("growth increment must be >= 0")


@dataclass(frozen=True)
class Adaptive:
    """Grow by ``delta`` whenever the descent condition fails.

    ``ref_n`` is the size of the reference graph standing in for the graphon;
    ``None`` means eight times ``n_max``.
    """

    delta: int = 10
    ref_n: int | None = None
    trials: int = 10

    def __post_init__(self):
        if self.delta < 0 or self.trials < 1:
            raise ValueError("adaptive growth needs delta >= 0 and trials >= 1")


def _strict(d, allowed, where):
    unknown = set(d) - set(allowed)
    if unknown:
        raise KeyError(f"unknown key(s) in {where}: {', '.join(sorted(unknown))}")


def growth_from_dict(d):
    d = dict(d)
    kind = d.pop("kind", None)
    if kind == "fixed":
        _strict(d, ("delta",), "growth")
        return FixedIncrement(**d)
    if kind == "adaptive":
        _strict(d, ("delta", "ref_n", "trials"), "growth")
        return Adaptive(**d)
    raise ValueError(f"growth kind must be 'fixed' or 'adaptive', got {kind!r}")


def growth_to_dict(g):
    if isinstance(g, FixedIncrement):
        return {"kind": "fixed", "delta": g.delta}
    return {"kind": "adaptive", "delta": g.delta, "ref_n": g.ref_n, "trials": g.trials}


@dataclass(frozen=True)
class TrainConfig:
    eta: float = 0.05
    epochs: int = 10
    n0: int = 10
    n_max: int = 100
    growth: FixedIncrement | Adaptive = field(default_factory=FixedIncrement)
    c: float = 1e-3
    epsilon: float = 1e-3
    lipschitz_estimate: float = 1.0
    seed: int = 0
    shuffle: bool = True
    full_batch: bool = False

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if not self.lipschitz_estimate > 0:
            raise ValueError("lipschitz_estimate must be positive")
        if not self.eta < 1.0 / self.lipschitz_estimate:
            raise ValueError(
                f"step size {self.eta} must be below 1/lipschitz_estimate = "
                f"{1.0 / self.lipschitz_estimate}"
            )
        if not 1 <= self.n0 <= self.n_max:
            raise ValueError("need 1 <= n0 <= n_max")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not 0.0 < self.c <= 1.0:
            raise ValueError("c must lie in (0, 1]")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        _strict(d, cls.__dataclass_fields__, "train config")
        if "growth" in d:
            d["growth"] = growth_from_dict(d["growth"])
        return cls(**d)

    def to_dict(self):
        out = {k: getattr(self, k) for k in self.__dataclass_fields__}
        out["growth"] = growth_to_dict(self.growth)
        return out


# -- data -----------------------------------------------------------------------

@dataclass
class Sample:
    gso: np.ndarray
    x: np.ndarray
    y: np.ndarray


@dataclass
class Dataset:
    samples: list

    def __post_init__(self):
        if self.samples:
            f0 = self.samples[0].x.shape[1]
            fl = self.samples[0].y.shape[1]
            for s in self.samples:
                if s.x.ndim != 2 or s.y.ndim != 2 or s.x.shape[1] != f0 or s.y.shape[1] != fl:
                    raise ValueError("samples disagree on feature counts")
                if s.x.shape[0] != s.y.shape[0] or s.gso.shape != (s.x.shape[0],) * 2:
                    raise ValueError("sample graph and signals disagree on node count")

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def save(self, path):
        """Stack same-size samples into an ``.npz`` archive."""
        np.savez(path,
                 gso=np.stack([s.gso for s in self.samples]),
                 x=np.stack([s.x for s in self.samples]),
                 y=np.stack([s.y for s in self.samples]))

    @classmethod
    def load(cls, path):
        with np.load(path) as z:
            return cls([Sample(g, x, y) for g, x, y in zip(z["gso"], z["x"], z["y"])])


# -- log ------------------------------------------------------------------------

LOG_HEADER = ["epoch", "n", "mean_loss", "mean_grad_norm", "grad_dist_est", "wall_time_s"]


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)
    stopped_early: bool = False

    def append(self, **row):
        if self.rows:
            if row["epoch"] <= self.rows[-1]["epoch"] or row["n"] < self.rows[-1]["n"]:
                raise ValueError("epochs must increase and n must not decrease")
        self.rows.append(row)

    def column(self, name):
        return [r[name] for r in self.rows]

    def write_csv(self, path, include_wall_time=True):
        """Write the log; ``include_wall_time=False`` leaves that column empty.

        Empty timing keeps repeated runs byte-identical.
        """
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LOG_HEADER)
            for r in self.rows:
                est = r.get("grad_dist_est")
                w.writerow([
                    r["epoch"], r["n"], repr(float(r["mean_loss"])),
                    repr(float(r["mean_grad_norm"])),
                    "" if est is None else repr(float(est)),
                    repr(float(r["wall_time"])) if include_wall_time else "",
                ])


# -- learning steps -------------------------------------------------------------

def sgd_epoch(params, dataset, S=None, eta=0.05, act=Activation.TANH, readout=None,
              loss=LossKind.HALF_MEAN_SQUARE, shuffle=False, seed=0, full_batch=False):
    """One pass of per-sample SGD (or one full-batch step).

    ``S`` overrides the graph stored in each sample.  Returns
    ``(params, mean_loss, mean_grad_norm)`` where the means are taken over the
    per-sample losses and gradient norms at the parameters used for each step.
    """
    if not eta > 0:
        raise ValueError("eta must be positive")
    order = np.arange(len(dataset))
    if shuffle:
        order = np.random.default_rng(seed).permutation(len(dataset))
    losses, norms = [], []
    batch = ParamTensor.zeros(params.dims, params.K) if full_batch else None
    for idx in order:
        s = dataset[int(idx)]
        value, grad = sample_loss_grad(params, s.gso if S is None else S, s.x, s.y,
                                       act, readout, loss)
        gnorm = grad.norm()
        if not (math.isfinite(value) and math.isfinite(gnorm)):
            raise TrainingError(f"non-finite loss or gradient at sample {int(idx)}", int(idx))
        losses.append(value)
        norms.append(gnorm)
        if full_batch:
            batch = batch.axpy(1.0 / len(dataset), grad)
        else:
            params = params.axpy(-eta, grad)
    if full_batch and len(dataset):
        params = params.axpy(-eta, batch)
    if not params.is_finite():
        raise TrainingError("parameters became non-finite")
    mean = lambda v: float(np.mean(v)) if v else 0.0  # noqa: E731
    return params, mean(losses), mean(norms)


def adaptive_grow_condition(grad_dist_est, epsilon, grad_norm):
    """True when the graph must grow: the descent inequality ``est + eps < norm`` fails."""
    return not (grad_dist_est + epsilon < grad_norm)


def stopping_threshold(params, c, epsilon):
    return gamma_constant(params.L, params.F, params.K) * c + epsilon


# -- teacher-student task -------------------------------------------------------

SIGNAL_FAMILIES = ("linear", "sine", "mixed")


def draw_signal(rng, family, features=1):
    """Normalized Lipschitz input signals, one per feature.

    ``mixed`` draws ``X(u) = a u + b sin(pi u)/pi`` with ``|a| + |b| <= 1``.
    """
    if family not in SIGNAL_FAMILIES:
        raise ValueError(f"unknown signal family {family!r}")
    if family in ("linear", "sine"):
        sig = GraphonSignal(family)
        return [sig] * features
    out = []
    for _ in range(features):
        a, b = rng.uniform(-1.0, 1.0, size=2)
        s = abs(a) + abs(b)
        if s > 1.0:
            a, b = a / s, b / s
        out.append(_Mixed(float(a), float(b)))
    return out


@dataclass(frozen=True)
class _Mixed:
    a: float
    b: float

    def sample(self, n):
        u = grid_points(n)
        return self.a * u + self.b * np.sin(np.pi * u) / np.pi


def _signal_matrix(signals, n, rng=None, noise=0.0):
    x = np.column_stack([s.sample(n) for s in signals])
    if noise and rng is not None:
        x = x + rng.normal(0.0, noise, size=x.shape)
    return x


def teacher_student_dataset(graphon, teacher, n, m_samples, signal_family="mixed", seed=0,
                            act=Activation.TANH, readout=None, noise=0.0, shared_graph=False,
                            graph_seed=None):
    """Labelled pairs ``(x, teacher(x; S_n))`` on stochastic graphs from ``graphon``.

    By default every sample gets its own graph; ``shared_graph`` draws one
    graph for the whole set, as a training epoch does.  ``graph_seed``, when
    given, seeds that shared graph separately from the signals, so the same
    graphon signals can be resampled on fresh graphs of any size.
    """
    gseed = derive(seed) if graph_seed is None else derive(graph_seed)
    shared = sample_graph(graphon, n, derive(gseed, 1)).gso() if shared_graph else None
    samples = []
    for j in range(m_samples):
        S = shared if shared_graph else sample_graph(graphon, n, derive(gseed, j, 1)).gso()
        rng = np.random.default_rng(derive(seed, j, 2))
        x = _signal_matrix(draw_signal(rng, signal_family, teacher.dims[0]), n, rng, noise)
        y, _ = gnn_forward(teacher, S, x, act, readout)
        samples.append(Sample(S, x, y))
    return Dataset(samples)


@dataclass
class TeacherStudentTask:
    """Synthetic task whose labels come from a fixed teacher network."""

    teacher: ParamTensor
    samples_per_epoch: int = 32
    signal_family: str = "mixed"
    noise: float = 0.0
    act: Activation = Activation.TANH
    readout: Activation | None = None
    loss: LossKind = LossKind.HALF_MEAN_SQUARE
    shared_graph: bool = True

    def init_params(self, seed):
        return ParamTensor.init(self.teacher.dims, self.teacher.K, derive(seed, 99))

    def dataset(self, graphon, n, seed, epoch=0):
        """Training set for one epoch.

        The graphon signals are fixed by ``seed`` alone; only the graphs are
        redrawn per epoch (at the current size), one for the whole epoch or one
        per sample depending on ``shared_graph``.
        """
        return teacher_student_dataset(graphon, self.teacher, n, self.samples_per_epoch,
                                       self.signal_family, seed, self.act, self.readout,
                                       self.noise, shared_graph=self.shared_graph,
                                       graph_seed=derive(seed, epoch))

    def trial_pair(self, graphon, n, ref_n, seed, trial):
        """Same input signal sampled on an ``n`` graph and a reference graph."""
        rng = np.random.default_rng(derive(seed, trial, 2))
        signals = draw_signal(rng, self.signal_family, self.teacher.dims[0])
        out = []
        for size in (n, ref_n):
            S = sample_graph(graphon, size, derive(seed, trial, size, 1)).gso()
            x = _signal_matrix(signals, size)
            y, _ = gnn_forward(self.teacher, S, x, self.act, self.readout)
            out.append(Sample(S, x, y))
        return out


# -- gradient distance ----------------------------------------------------------

def grad_distance_estimate(params, graphon, n, ref_n, trials, task, seed=0, pool=None):
    """Distance between loss gradients on an ``n``-node graph and a reference graph.

    Each trial draws a fresh signal and fresh graphs; the reference graph of
    size ``ref_n`` stands in for the graphon.  Returns mean, median and the
    per-trial Frobenius distances in trial order.
    """
    if ref_n < n:
        raise ValueError("ref_n must be >= n")
    if trials < 1:
        raise ValueError("trials must be >= 1")

    def one(t):
        small, ref = task.trial_pair(graphon, n, ref_n, seed, t)
        _, g_small = sample_loss_grad(params, small.gso, small.x, small.y,
                                      task.act, task.readout, task.loss)
        _, g_ref = sample_loss_grad(params, ref.gso, ref.x, ref.y,
                                    task.act, task.readout, task.loss)
        return (g_small - g_ref).norm()

    per_trial = list(pool.map(one, range(trials))) if pool else [one(t) for t in range(trials)]
    return {"mean": float(np.mean(per_trial)), "median": float(statistics.median(per_trial)),
            "per_trial": per_trial}


# -- the growing-graph loop -----------------------------------------------------

def train_growing(config, graphon, task, params=None, pool=None, on_epoch=None):
    """Train on graphs that grow between epochs.

    Each epoch draws a dataset at the current size, runs :func:`sgd_epoch`,
    logs, checks the stopping rule ``mean_grad_norm <= gamma c + epsilon`` and
    then grows ``n`` (fixed increment, or adaptively when the descent
    condition fails).  Returns ``(log, params)``.
    """
    if params is None:
        params = task.init_params(config.seed)
    growth = config.growth
    if isinstance(growth, Adaptive) and not hasattr(task, "trial_pair"):
        raise ValueError("adaptive growth needs a task that provides reference pairs")
    ref_n = None
    if isinstance(growth, Adaptive):
        ref_n = growth.ref_n or 8 * config.n_max
    threshold = stopping_threshold(params, config.c, config.epsilon)
    log_ = TrainLog()
    n = config.n0
    for epoch in range(config.epochs):
        start = time.perf_counter()
        data = task.dataset(graphon, n, config.seed, epoch)
        params, mean_loss, mean_norm = sgd_epoch(
            params, data, None, config.eta, task.act, task.readout, task.loss,
            config.shuffle, derive(config.seed, epoch, 1), config.full_batch)
        est = None
        grow = isinstance(growth, FixedIncrement)
        if isinstance(growth, Adaptive):
            est = grad_distance_estimate(params, graphon, n, ref_n, growth.trials, task,
                                         derive(config.seed, epoch, 2), pool)["mean"]
            grow = adaptive_grow_condition(est, config.epsilon, mean_norm)
        log_.append(epoch=epoch, n=n, mean_loss=mean_loss, mean_grad_norm=mean_norm,
                    grad_dist_est=est, wall_time=time.perf_counter() - start, grew=False)
        if on_epoch is not None:
            on_epoch(log_.rows[-1], params)
        if mean_norm <= threshold:
            log_.stopped_early = True
            break
        if grow and growth.delta:
            target = n + growth.delta
            if target > config.n_max:
                log.warning("growth to %d nodes clamped to n_max=%d", target, config.n_max)
                target = config.n_max
            log_.rows[-1]["grew"] = target > n
            n = target
    return log_, params
