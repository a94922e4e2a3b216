"""Fixed-step closed-loop simulation of plant, controllers, and observers.

One synchronous round: every agent computes its input from its own and
1-hop true states plus its multi-hop estimates, messages are exchanged
(carrying same-instant states, inputs, relays, and estimates), and plant
plus observers advance one explicit Euler step with a shared ``dt``.

Explicit Euler is the deliberate choice: the observer right-hand sides are
discontinuous, so higher-order smooth integrators buy nothing, and the
residual sign-chattering scales linearly with the step size. Convergence is
therefore detected as entry into a small ball followed by permanence inside
the chattering band, never as an exact zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Optional

import numpy as np

from .dense_linalg import sym_eig
from .errors import DivergenceDetected, ProtocolError, StateBoxViolation
from .gain_tuning import GainSet, PlantModel
from .graph_khop import Graph, all_khop_sets
from .khop_observer import (
    NeighborMessage,
    ObserverState,
    observer_derivative,
)

CONV_EPS_FLOOR = 1e-6
CONV_EPS_REL = 1e-3
DEFAULT_BAND_SCALE = 5.0
LAPLACIAN_ZERO_TOL = 1e-8


@dataclass(frozen=True)
class Controller:
    """Input law selector.

    ``khop_consensus`` drives agents toward agreement over a target graph
    whose edges may be absent from the communication graph; every target
    neighbor not reachable in one hop must be covered by the hop horizon,
    otherwise the needed estimate does not exist and construction fails.
    ``generic_feedback`` delegates to a user callable
    ``feedback(i, x_i, onehop_states, est_states) -> u_i``.
    """

    kind: str
    target_graph: Optional[Graph] = None
    feedback: Optional[Callable] = None

    def __post_init__(self):
        if self.kind not in ("zero", "khop_consensus", "generic_feedback"):
            raise ValueError(f"unknown controller kind {self.kind!r}")
        if self.kind == "khop_consensus" and self.target_graph is None:
            raise ValueError("khop_consensus controller needs a target graph")
        if self.kind == "generic_feedback" and self.feedback is None:
            raise ValueError("generic_feedback controller needs a callable")


@dataclass(frozen=True)
class SimConfig:
    graph: Graph
    k: int
    plant: PlantModel
    gains: GainSet
    controller: Controller
    dt: float
    t_end: float
    x0: np.ndarray
    xhat0: Optional[list] = None
    uhat0: Optional[list] = None
    state_box: Optional[tuple] = None
    conv_eps: Optional[float] = None
    band_scale: float = DEFAULT_BAND_SCALE
    decimate: int = 1
    boundary_layer: Optional[float] = None

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.t_end <= self.dt:
            raise ValueError("t_end must exceed dt")
        if self.decimate < 1:
            raise ValueError("decimate must be >= 1")
        if self.conv_eps is not None and self.conv_eps <= 0:
            raise ValueError("conv_eps must be positive")
        x0 = np.array(self.x0, dtype=float)
        if x0.shape != (self.graph.n, self.plant.N):
            raise ValueError(
                f"x0 must be ({self.graph.n}, {self.plant.N}), got {x0.shape}"
            )
        if self.state_box is not None:
            lo, hi = self.state_box
            if np.any(x0 < lo) or np.any(x0 > hi):
                raise ValueError("x0 outside the state box")
        x0.setflags(write=False)
        object.__setattr__(self, "x0", x0)


@dataclass(frozen=True)
class Telemetry:
    """Sampled run record plus detected convergence times.

    ``errx``/``erru`` hold, per estimated agent, the norm of the stacked
    error made by all of that agent's estimators (the quantity the
    finite-time certificates bound). ``v`` is the consensus-disturbance
    vector injected by estimate-based control terms.
    """

    times: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    errx: np.ndarray
    erru: np.ndarray
    cons_dist: np.ndarray
    v: np.ndarray
    eta: np.ndarray
    band_x: np.ndarray
    band_u: np.ndarray
    eps_x: np.ndarray
    eps_u: np.ndarray
    T_x_obs: np.ndarray
    T_u_obs: np.ndarray
    X_obs: float

    @property
    def T_u_obs_global(self) -> float:
        vals = self.T_u_obs[np.isfinite(self.T_u_obs)]
        return float(vals.max()) if vals.size else np.nan


@dataclass
class SimWorld:
    t: float
    x: np.ndarray
    obs: list
    structure: "SimStructure"


@dataclass(frozen=True)
class SimStructure:
    """Static wiring derived once from graph, horizon, and controller."""

    nbs: list
    one_hop: list              # per agent, tuple of neighbor ids
    ct_neighbors: list         # per agent, target-and-communication neighbors
    t_only_neighbors: list     # per agent, target-only neighbors (need estimates)
    estimators_of: list        # per target agent, list of (estimator_idx, block)


def consensus_distance(x: np.ndarray) -> float:
    """Euclidean distance of the stacked state to the consensus set."""
    x = np.asarray(x, dtype=float)
    centered = x - x.mean(axis=0, keepdims=True)
    return float(np.linalg.norm(centered))


def lambda2(graph: Graph) -> float:
    """Smallest Laplacian eigenvalue above the zero tolerance."""
    w, _ = sym_eig(graph.laplacian())
    above = w[w > LAPLACIAN_ZERO_TOL]
    if above.size == 0:
        raise ValueError("Laplacian has no positive eigenvalue")
    return float(above[0])


def consensus_control(
    i: int,
    x_own: np.ndarray,
    onehop_states: Mapping,
    est_states: Mapping,
    target_neighbors,
    ct_neighbors,
) -> np.ndarray:
    """Consensus input using true states where available, estimates elsewhere."""
    u = np.zeros_like(np.asarray(x_own, dtype=float))
    for j in ct_neighbors:
        u += onehop_states[j] - x_own
    for j in target_neighbors:
        if j in ct_neighbors:
            continue
        est = est_states.get(j)
        if est is None:
            raise ProtocolError(
                f"agent {i}: controller needs an estimate of agent {j}"
            )
        u += est - x_own
    return u


def build_structure(config: SimConfig) -> SimStructure:
    g = config.graph
    nbs = all_khop_sets(g, config.k)
    one_hop = [nb.one_hop for nb in nbs]
    ct, t_only = [], []
    if config.controller.kind == "khop_consensus":
        tg = config.controller.target_graph
        if tg.n != g.n:
            raise ValueError("target graph must cover the same agents")
        for i in range(1, g.n + 1):
            tn = set(tg.neighbors(i))
            cn = set(g.neighbors(i))
            ct.append(tuple(sorted(tn & cn)))
            only = tuple(sorted(tn - cn))
            for j in only:
                if j not in nbs[i - 1].members:
                    raise ProtocolError(
                        f"agent {i}: target neighbor {j} is neither 1-hop nor "
                        f"within the {config.k}-hop horizon"
                    )
            t_only.append(only)
    else:
        ct = [()] * g.n
        t_only = [()] * g.n
    estimators_of = [[] for _ in range(g.n)]
    for idx, nb in enumerate(nbs):
        for b, l in enumerate(nb.members):
            estimators_of[l - 1].append((idx, b))
    return SimStructure(
        nbs=nbs,
        one_hop=one_hop,
        ct_neighbors=ct,
        t_only_neighbors=t_only,
        estimators_of=estimators_of,
    )


def init_world(config: SimConfig) -> SimWorld:
    structure = build_structure(config)
    n, n_dim = config.graph.n, config.plant.N
    obs = []
    for idx, nb in enumerate(structure.nbs):
        size = nb.eta * n_dim
        if config.xhat0 is None:
            xh = np.zeros(size)
        else:
            xh = np.array(config.xhat0[idx], dtype=float).reshape(size)
        if config.uhat0 is None:
            uh = np.zeros(size)
        else:
            uh = np.array(config.uhat0[idx], dtype=float).reshape(size)
        obs.append(ObserverState(agent=idx + 1, x_hat=xh, u_hat=uh))
    return SimWorld(t=0.0, x=config.x0.copy(), obs=obs, structure=structure)


def _est_blocks(obs: ObserverState, nb, n_dim: int) -> dict:
    return {
        l: obs.x_hat[b * n_dim : (b + 1) * n_dim] for b, l in enumerate(nb.members)
    }


def _compute_control(world: SimWorld, config: SimConfig) -> np.ndarray:
    s = world.structure
    n, n_dim = config.graph.n, config.plant.N
    u = np.zeros((n, n_dim))
    kind = config.controller.kind
    if kind == "zero":
        return u
    for i in range(1, n + 1):
        onehop = {j: world.x[j - 1] for j in s.one_hop[i - 1]}
        est = _est_blocks(world.obs[i - 1], s.nbs[i - 1], n_dim)
        if kind == "khop_consensus":
            tn = s.ct_neighbors[i - 1] + s.t_only_neighbors[i - 1]
            u[i - 1] = consensus_control(
                i, world.x[i - 1], onehop, est, tn, s.ct_neighbors[i - 1]
            )
        else:
            u[i - 1] = np.asarray(
                config.controller.feedback(i, world.x[i - 1], onehop, est),
                dtype=float,
            )
    return u


def _disturbance(world: SimWorld, config: SimConfig) -> np.ndarray:
    """Per-agent consensus disturbance: sum of estimate errors the input uses."""
    s = world.structure
    n, n_dim = config.graph.n, config.plant.N
    v = np.zeros((n, n_dim))
    if config.controller.kind != "khop_consensus":
        return v
    for i in range(n):
        nb = s.nbs[i]
        for j in s.t_only_neighbors[i]:
            b = nb.member_index(j)
            v[i] += world.x[j - 1] - world.obs[i].x_hat[b * n_dim : (b + 1) * n_dim]
    return v


def _advance(world: SimWorld, u: np.ndarray, config: SimConfig) -> SimWorld:
    s = world.structure
    n, n_dim = config.graph.n, config.plant.N
    x = world.x
    # Outbound messages: states, inputs, 1-hop relays, and estimates, all at
    # the same instant (zero-delay propagation).
    msgs = {}
    for j in range(1, n + 1):
        nbj = s.nbs[j - 1]
        msgs[j] = NeighborMessage(
            sender=j,
            state=x[j - 1],
            input=u[j - 1],
            relayed_states={m: x[m - 1] for m in s.one_hop[j - 1]},
            relayed_inputs={m: u[m - 1] for m in s.one_hop[j - 1]},
            est_states=world.obs[j - 1].x_hat,
            est_inputs=world.obs[j - 1].u_hat,
            members=nbj.members,
        )
    derivs = []
    for i in range(1, n + 1):
        inbox = {j: msgs[j] for j in s.one_hop[i - 1]}
        derivs.append(
            observer_derivative(
                world.obs[i - 1],
                inbox,
                s.nbs[i - 1],
                config.plant,
                config.gains,
                boundary_layer=config.boundary_layer,
            )
        )
    dx = x @ config.plant.A.T + u
    if config.plant.f is not None:
        for i in range(n):
            dx[i] += config.plant.f_eval(x[i])
    t_next = world.t + config.dt
    x_next = x + config.dt * dx
    obs_next = []
    est_sum = 0.0
    for i in range(n):
        o = world.obs[i]
        xh = o.x_hat + config.dt * derivs[i].dx_hat
        uh = o.u_hat + config.dt * derivs[i].du_hat
        est_sum += float(xh.sum()) + float(uh.sum())
        obs_next.append(ObserverState(agent=i + 1, x_hat=xh, u_hat=uh))
    if not np.isfinite(float(x_next.sum())):
        for i in range(n):
            if not np.all(np.isfinite(x_next[i])):
                raise DivergenceDetected(t_next, i + 1)
    if not np.isfinite(est_sum):
        for i in range(n):
            if not (
                np.all(np.isfinite(obs_next[i].x_hat))
                and np.all(np.isfinite(obs_next[i].u_hat))
            ):
                raise DivergenceDetected(t_next, i + 1, "non-finite estimate")
    if config.state_box is not None:
        lo, hi = config.state_box
        bad = (x_next < lo) | (x_next > hi)
        if np.any(bad):
            agent = int(np.argwhere(bad)[0][0]) + 1
            value = float(x_next[bad][0])
            raise StateBoxViolation(t_next, agent, value, (lo, hi))
    return SimWorld(t=t_next, x=x_next, obs=obs_next, structure=s)


def step(world: SimWorld, config: SimConfig) -> SimWorld:
    """One synchronous round: control, messages, derivatives, Euler update."""
    return _advance(world, _compute_control(world, config), config)


def _stacked_error_norm(world: SimWorld, truth: np.ndarray, attr: str, n_dim: int) -> np.ndarray:
    """Per estimated agent, norm of the stacked errors of all its estimators."""
    s = world.structure
    n = len(s.estimators_of)
    out = np.zeros(n)
    for l in range(n):
        sq = 0.0
        for est_idx, b in s.estimators_of[l]:
            vec = getattr(world.obs[est_idx], attr)
            diff = truth[l] - vec[b * n_dim : (b + 1) * n_dim]
            sq += float(diff @ diff)
        out[l] = np.sqrt(sq)
    return out


def initial_error_norms(config: SimConfig) -> tuple:
    """Stacked estimation-error norms per estimated agent at t = 0.

    The input error uses the controller's t = 0 output, matching how the
    run itself initializes the input vector.
    """
    world = init_world(config)
    u0 = _compute_control(world, config)
    x_err0 = _stacked_error_norm(world, world.x, "x_hat", config.plant.N)
    u_err0 = _stacked_error_norm(world, u0, "u_hat", config.plant.N)
    return x_err0, u_err0


def detect_convergence(
    times: np.ndarray, series: np.ndarray, eps: float, band: float
) -> float:
    """First time the series is inside ``eps`` and never again leaves ``band``.

    Returns NaN when no such time exists in the sampled horizon.
    """
    series = np.asarray(series, dtype=float)
    suffix_max = np.maximum.accumulate(series[::-1])[::-1]
    ok = (series < eps) & (suffix_max <= band)
    if not ok.any():
        return float("nan")
    return float(times[int(np.argmax(ok))])


def _assemble_telemetry(config, structure, logs, rows) -> Telemetry:
    times, states, inputs, errx, erru, cons, v_log = (
        arr[:rows] for arr in logs
    )
    n = config.graph.n
    eta = np.array([nb.eta for nb in structure.nbs], dtype=int)
    band_x = np.where(eta > 0, config.band_scale * config.gains.theta * config.dt, 0.0)
    band_u = np.where(eta > 0, config.band_scale * config.gains.pi * config.dt, 0.0)
    eps_x = np.zeros(n)
    eps_u = np.zeros(n)
    t_x_obs = np.full(n, np.nan)
    t_u_obs = np.full(n, np.nan)
    for l in range(n):
        eps_x[l] = (
            config.conv_eps
            if config.conv_eps is not None
            else max(CONV_EPS_FLOOR, CONV_EPS_REL * (errx[0, l] if rows else 0.0))
        )
        eps_u[l] = (
            config.conv_eps
            if config.conv_eps is not None
            else max(CONV_EPS_FLOOR, CONV_EPS_REL * (erru[0, l] if rows else 0.0))
        )
        if rows:
            t_x_obs[l] = detect_convergence(times, errx[:, l], eps_x[l], band_x[l])
            t_u_obs[l] = detect_convergence(times, erru[:, l], eps_u[l], band_u[l])
    return Telemetry(
        times=times,
        states=states,
        inputs=inputs,
        errx=errx,
        erru=erru,
        cons_dist=cons,
        v=v_log,
        eta=eta,
        band_x=band_x,
        band_u=band_u,
        eps_x=eps_x,
        eps_u=eps_u,
        T_x_obs=t_x_obs,
        T_u_obs=t_u_obs,
        X_obs=float(errx.max()) if errx.size else 0.0,
    )


def run(config: SimConfig) -> Telemetry:
    """Integrate to the horizon and assemble telemetry with detection.

    On divergence the samples logged so far are attached to the raised
    exception as ``partial_telemetry`` so callers can retain them.
    """
    world = init_world(config)
    n, n_dim = config.graph.n, config.plant.N
    n_steps = int(round(config.t_end / config.dt))
    sample_ids = list(range(0, n_steps + 1, config.decimate))
    if sample_ids[-1] != n_steps:
        sample_ids.append(n_steps)
    n_samples = len(sample_ids)
    logs = (
        np.zeros(n_samples),
        np.zeros((n_samples, n, n_dim)),
        np.zeros((n_samples, n, n_dim)),
        np.zeros((n_samples, n)),
        np.zeros((n_samples, n)),
        np.zeros(n_samples),
        np.zeros((n_samples, n, n_dim)),
    )
    times, states, inputs, errx, erru, cons, v_log = logs
    sample_set = set(sample_ids)
    row = 0
    try:
        for k in range(n_steps + 1):
            u = _compute_control(world, config)
            if k in sample_set:
                times[row] = world.t
                states[row] = world.x
                inputs[row] = u
                errx[row] = _stacked_error_norm(world, world.x, "x_hat", n_dim)
                erru[row] = _stacked_error_norm(world, u, "u_hat", n_dim)
                cons[row] = consensus_distance(world.x)
                v_log[row] = _disturbance(world, config)
                row += 1
            if k == n_steps:
                break
            world = _advance(world, u, config)
    except DivergenceDetected as exc:
        exc.partial_telemetry = _assemble_telemetry(config, world.structure, logs, row)
        raise
    return _assemble_telemetry(config, world.structure, logs, row)


def csv_header(n: int, n_dim: int) -> list:
    cols = ["t"]
    cols += [f"x_{i}_{c}" for i in range(1, n + 1) for c in range(1, n_dim + 1)]
    cols += [f"u_{i}_{c}" for i in range(1, n + 1) for c in range(1, n_dim + 1)]
    cols += [f"errx_{i}" for i in range(1, n + 1)]
    cols += [f"erru_{i}" for i in range(1, n + 1)]
    cols += ["consdist"]
    cols += [f"v_{i}_{c}" for i in range(1, n + 1) for c in range(1, n_dim + 1)]
    return cols


def write_csv(tel: Telemetry, path) -> None:
    """Write telemetry rows; float formatting is shortest round-trip repr."""
    n_samples, n, n_dim = tel.states.shape
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(csv_header(n, n_dim)) + "\n")
        for r in range(n_samples):
            row = [tel.times[r]]
            row += list(tel.states[r].reshape(-1))
            row += list(tel.inputs[r].reshape(-1))
            row += list(tel.errx[r])
            row += list(tel.erru[r])
            row.append(tel.cons_dist[r])
            row += list(tel.v[r].reshape(-1))
            fh.write(",".join(repr(float(val)) for val in row) + "\n")


def read_csv(path) -> dict:
    """Load a telemetry CSV back into column-name -> array form."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    if data.shape[1] != len(header):
        raise ValueError("telemetry CSV malformed: column count mismatch")
    return {name: data[:, idx] for idx, name in enumerate(header)}
