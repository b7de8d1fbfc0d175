"""Planar flocking benchmark: dynamics, expert controller and imitation data."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .gnn import Activation, gnn_forward
from .trainer import Dataset, Sample, derive


class SingularityError(RuntimeError):
    """Two agents share a position, so the potential is undefined."""

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


@dataclass(frozen=True)
class FlockConfig:
    comm_radius: float = 2.0
    ca_radius: float = 1.0
    dt: float = 0.02
    u_bound: float = 10.0
    min_init_dist: float = 0.1
    # None means sqrt(n / pi), about one square metre per agent
    init_disc_radius: float | None = None
    vel_bias_range: float = 3.0
    vel_noise_range: float = 3.0
    horizon: int = 100
    # +grad CA as literally written is attractive; False uses the repulsive sign
    literal_sign: bool = False

    def __post_init__(self):
        for name in ("comm_radius", "ca_radius", "dt", "u_bound", "min_init_dist",
                     "vel_bias_range", "vel_noise_range"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.init_disc_radius is not None and not self.init_disc_radius > 0:
            raise ValueError("init_disc_radius must be positive")
        if self.ca_radius > self.comm_radius:
            raise ValueError("ca_radius must not exceed comm_radius")
        if self.horizon < 0:
            raise ValueError("horizon must be >= 0")

    def disc_radius(self, n):
        if self.init_disc_radius is not None:
            return self.init_disc_radius
        return math.sqrt(n / math.pi)


@dataclass
class FlockState:
    positions: np.ndarray
    velocities: np.ndarray
    t: int = 0

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 2)
        self.velocities = np.asarray(self.velocities, dtype=float).reshape(-1, 2)
        if self.positions.shape != self.velocities.shape or len(self.positions) < 1:
            raise ValueError("positions and velocities must both be n x 2 with n >= 1")
        if not (np.all(np.isfinite(self.positions)) and np.all(np.isfinite(self.velocities))):
            raise ValueError("flock state must be finite")

    @property
    def n(self):
        return len(self.positions)

    def copy(self):
        return FlockState(self.positions.copy(), self.velocities.copy(), self.t)


@dataclass
class Trajectory:
    states: list = field(default_factory=list)
    adjacency: list = field(default_factory=list)
    features: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    sigma_v: list = field(default_factory=list)

    def __len__(self):
        return len(self.states)

    def total_sigma_v(self):
        return float(sum(self.sigma_v))

    def min_distance(self):
        return min((min_pairwise_distance(s.positions) for s in self.states), default=math.inf)


def pairwise_diff(positions):
    """``diff[i, j] = r_i - r_j`` and the matching distance matrix."""
    diff = positions[:, None, :] - positions[None, :, :]
    return diff, np.sqrt(np.sum(diff * diff, axis=-1))


def min_pairwise_distance(positions):
    n = len(positions)
    if n < 2:
        return math.inf
    _, dist = pairwise_diff(positions)
    return float(dist[np.triu_indices(n, k=1)].min())


def init_swarm(n, config=FlockConfig(), seed=0, max_attempts=10**6):
    """Random positions in a disc with a minimum spacing, biased random velocities.

    Whole configurations are drawn uniformly in the disc and rejected until
    every pairwise distance is at least ``min_init_dist``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    radius = config.disc_radius(n)
    for _ in range(max_attempts):
        rho = radius * np.sqrt(rng.random(n))
        theta = 2 * np.pi * rng.random(n)
        pos = np.column_stack([rho * np.cos(theta), rho * np.sin(theta)])
        if min_pairwise_distance(pos) >= config.min_init_dist:
            break
    else:
        raise ValueError(
            f"could not place {n} agents {config.min_init_dist} m apart in a "
            f"disc of radius {radius:.3f} m after {max_attempts} attempts"
        )
    bias = rng.uniform(-config.vel_bias_range, config.vel_bias_range, size=2)
    noise = rng.uniform(-config.vel_noise_range, config.vel_noise_range, size=(n, 2))
    return FlockState(pos, bias + noise, 0)


def comm_graph(positions, radius):
    """0/1 proximity graph (edge iff distance <= radius) and its GSO ``A/n``."""
    if not radius > 0:
        raise ValueError("radius must be positive")
    positions = np.asarray(positions, dtype=float)
    n = len(positions)
    _, dist = pairwise_diff(positions)
    adj = (dist <= radius).astype(float)
    np.fill_diagonal(adj, 0.0)
    return adj, adj / n


def ca_potential_and_gradient(r_i, r_j, ca_radius=1.0):
    """Collision-avoidance potential and its gradient with respect to ``r_i``."""
    diff = np.asarray(r_i, dtype=float) - np.asarray(r_j, dtype=float)
    d2 = float(diff @ diff)
    if d2 == 0.0:
        raise SingularityError("collision potential is singular at zero distance")
    if d2 <= ca_radius**2:
        value = 1.0 / d2 - math.log(d2)
        grad = -2.0 * diff * (1.0 / d2**2 + 1.0 / d2)
    else:
        value = 1.0 / ca_radius**2 - math.log(ca_radius**2)
        grad = np.zeros(2)
    return value, grad


def _ca_gradients(positions, ca_radius):
    """Sum over j of grad_{r_i} CA(r_i, r_j) for every agent, vectorised."""
    diff, dist = pairwise_diff(positions)
    n = len(positions)
    off = ~np.eye(n, dtype=bool)
    if np.any(dist[off] == 0.0):
        raise SingularityError("two agents share a position")
    d2 = np.where(off, dist * dist, 1.0)
    coef = np.where(off & (dist <= ca_radius), -2.0 * (1.0 / d2**2 + 1.0 / d2), 0.0)
    return np.sum(coef[:, :, None] * diff, axis=1)


def clamp_actions(actions, bound):
    return np.clip(actions, -bound, bound)


def expert_controller(state, config=FlockConfig()):
    """Centralized consensus-plus-repulsion action, clamped per axis."""
    n = state.n
    vbar = state.velocities.mean(axis=0)
    grad = _ca_gradients(state.positions, config.ca_radius)
    ca_term = grad if config.literal_sign else -grad
    raw = -n * (state.velocities - vbar) + ca_term
    return clamp_actions(raw, config.u_bound)


def step_dynamics(state, actions, dt):
    actions = np.asarray(actions, dtype=float)
    if not np.all(np.isfinite(actions)):
        raise ValueError("actions must be finite")
    pos = state.positions + state.velocities * dt + actions * (dt * dt / 2.0)
    vel = state.velocities + actions * dt
    return FlockState(pos, vel, state.t + 1)


def agent_features(state, adjacency):
    """Per-agent neighbour sums ``[v_i - v_j, r_ij/|r_ij|^4, r_ij/|r_ij|^2]``."""
    adj = np.asarray(adjacency, dtype=float)
    diff, dist = pairwise_diff(state.positions)
    linked = adj > 0
    if np.any(dist[linked] == 0.0):
        raise SingularityError("neighbouring agents share a position")
    d2 = np.where(linked, dist * dist, 1.0)
    w = adj[:, :, None]
    vdiff = state.velocities[:, None, :] - state.velocities[None, :, :]
    f_vel = np.sum(w * vdiff, axis=1)
    f_r4 = np.sum(w * diff / (d2 * d2)[:, :, None], axis=1)
    f_r2 = np.sum(w * diff / d2[:, :, None], axis=1)
    return np.hstack([f_vel, f_r4, f_r2])


def velocity_variation(state):
    dev = state.velocities - state.velocities.mean(axis=0)
    return float(np.sum(dev * dev))


def relative_cost(policy_traj, expert_traj):
    """Ratio of summed velocity variation, policy over expert.

    Returns ``(ratio, degenerate)``; a zero expert cost gives ``(inf, True)``.
    """
    if len(policy_traj) != len(expert_traj):
        raise ValueError("trajectories must have matching horizons")
    expert = expert_traj.total_sigma_v()
    if expert == 0.0:
        return math.inf, True
    return policy_traj.total_sigma_v() / expert, False


@dataclass
class GnnPolicy:
    """Learned decentralized policy: ``clamp(Phi(features; H, A/n))``."""

    params: object
    act: Activation = Activation.TANH
    readout: Activation = Activation.IDENTITY

    def __call__(self, state, features, gso, config):
        out, _ = gnn_forward(self.params, gso, features, self.act, readout=self.readout)
        return clamp_actions(out, config.u_bound)


def expert_policy(state, features, gso, config):
    return expert_controller(state, config)


def zero_policy(state, features, gso, config):
    return np.zeros((state.n, 2))


def rollout(initial, policy=expert_policy, config=FlockConfig(), horizon=None):
    """Simulate ``horizon`` steps; every step records the pre-step state.

    ``policy`` is any callable ``(state, features, gso, config) -> actions``.
    """
    horizon = config.horizon if horizon is None else horizon
    traj = Trajectory()
    state = initial.copy()
    for _ in range(horizon):
        try:
            adj, gso = comm_graph(state.positions, config.comm_radius)
            feats = agent_features(state, adj)
            actions = policy(state, feats, gso, config)
        except SingularityError as exc:
            raise SingularityError("agents collided", step=state.t) from exc
        traj.states.append(state)
        traj.adjacency.append(adj)
        traj.features.append(feats)
        traj.actions.append(actions)
        traj.sigma_v.append(velocity_variation(state))
        state = step_dynamics(state, actions, config.dt)
    return traj


def _episode_seed(seed, episode, attempt):
    return derive(seed, episode, attempt)


def expert_episode(n, config, seed, episode, retries=10):
    """Expert rollout for one episode, retried on collisions with fresh seeds."""
    last = None
    for attempt in range(retries + 1):
        init = init_swarm(n, config, _episode_seed(seed, episode, attempt))
        try:
            return init, rollout(init, expert_policy, config, config.horizon)
        except SingularityError as exc:
            last = exc
    raise RuntimeError(f"episode {episode} failed after {retries} retries") from last


def generate_dataset(n, episodes, horizon=None, config=FlockConfig(), seed=0, pool=None):
    """Imitation pairs (features, expert action) from expert rollouts.

    Samples are ordered by (episode, step).  ``pool`` is an optional executor
    used to run episodes concurrently; the result does not depend on it.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    if horizon is not None:
        config = replace(config, horizon=horizon)
    run = lambda e: expert_episode(n, config, seed, e)[1]  # noqa: E731
    trajs = list(pool.map(run, range(episodes))) if pool else [run(e) for e in range(episodes)]
    samples = []
    for traj in trajs:
        for gso_adj, feats, acts in zip(traj.adjacency, traj.features, traj.actions):
            samples.append(Sample(gso_adj / n, feats, acts))
    return Dataset(samples)


def evaluate_policy(params, n, episodes, config=FlockConfig(), seed=0,
                    act=Activation.TANH, readout=Activation.IDENTITY, pool=None):
    """Paired policy/expert rollouts from shared initial states.

    Returns per-episode dicts with the two summed costs, their ratio and the
    trajectories themselves.
    """
    policy = GnnPolicy(params, act, readout)

    def run(e):
        init, expert = expert_episode(n, config, seed, e)
        learned = rollout(init, policy, config, config.horizon)
        ratio, degenerate = relative_cost(learned, expert)
        return {
            "episode": e,
            "policy_cost": learned.total_sigma_v(),
            "expert_cost": expert.total_sigma_v(),
            "relative_cost": ratio,
            "degenerate": degenerate,
            "policy_traj": learned,
            "expert_traj": expert,
        }

    return list(pool.map(run, range(episodes))) if pool else [run(e) for e in range(episodes)]


TRAJECTORY_HEADER = ["episode", "step", "agent", "rx", "ry", "vx", "vy", "ux", "uy", "sigma_v"]


def write_trajectories(path, trajectories):
    """Write ``(episode, Trajectory)`` pairs in long CSV form, one row per agent."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAJECTORY_HEADER)
        for episode, traj in trajectories:
            for step, (state, acts, sig) in enumerate(zip(traj.states, traj.actions, traj.sigma_v)):
                for a in range(state.n):
                    w.writerow([
                        episode, step, a,
                        repr(float(state.positions[a, 0])), repr(float(state.positions[a, 1])),
                        repr(float(state.velocities[a, 0])), repr(float(state.velocities[a, 1])),
                        repr(float(acts[a, 0])), repr(float(acts[a, 1])),
                        repr(float(sig)),
                    ])


@dataclass
class FlockingTask:
    """Imitation task for the growing-graph trainer.

    Every epoch runs ``episodes`` fresh expert rollouts with ``n`` agents; the
    graphon argument of the trainer is unused because graphs come from the
    agents' positions.
    """

    config: FlockConfig = field(default_factory=FlockConfig)
    episodes: int = 10
    hidden: tuple = (16,)
    K: int = 3
    act: Activation = Activation.TANH
    readout: Activation = Activation.IDENTITY
    loss: object = None
    pool: object = None

    def __post_init__(self):
        from .gnn import LossKind

        if self.loss is None:
            self.loss = LossKind.HALF_MEAN_SQUARE

    @property
    def dims(self):
        return (6, *self.hidden, 2)

    def init_params(self, seed):
        from .gnn import ParamTensor

        return ParamTensor.init(self.dims, self.K, derive(seed, 99))

    def dataset(self, graphon, n, seed, epoch=0):
        return generate_dataset(n, self.episodes, self.config.horizon, self.config,
                                derive(seed, epoch, 0), self.pool)
