"""Per-agent finite-time state and input observers driven by 1-hop messages.

Each agent keeps stacked estimates of the states and inputs of its
multi-hop neighbors, ordered by ascending global index. One update round
consumes exactly one message per 1-hop neighbor; the correction signal for
the block estimating agent ``l`` is

    xi_l = sum over senders that also estimate l of (their estimate - ours)
         + sum over senders adjacent to l of (relayed true value - ours)

and the input-side signal ``rho`` has the same shape with inputs in place
of states. The state estimate then follows the plant model plus a linear
and a signed correction; the input estimate moves by a signed correction
only. sign(0) = +1 throughout, so at exact agreement the estimates still
chatter by one step.

Which sums apply is decided from message content alone (a sender's message
shows which agents it estimates and which it can relay), so the update
never needs non-local knowledge.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

from .errors import MissingNeighborData, NumericalError, ProtocolError
from .gain_tuning import GainSet, PlantModel
from .graph_khop import KHopNeighborhood


def sign(v: np.ndarray, boundary_layer: Optional[float] = None) -> np.ndarray:
    """Componentwise sign with sign(0) = +1.

    With a boundary layer the discontinuity is replaced by the saturation
    ``clip(v / delta, -1, 1)``, useful for chattering studies but never the
    default.
    """
    v = np.asarray(v, dtype=float)
    if boundary_layer is not None:
        if boundary_layer <= 0:
            raise ValueError("boundary layer width must be positive")
        return np.clip(v / boundary_layer, -1.0, 1.0)
    return np.where(v >= 0.0, 1.0, -1.0)


@dataclass
class ObserverState:
    """Stacked estimates held by one agent, ordered by its member list."""

    agent: int
    x_hat: np.ndarray
    u_hat: np.ndarray

    def copy(self) -> "ObserverState":
        return ObserverState(self.agent, self.x_hat.copy(), self.u_hat.copy())


@dataclass(frozen=True)
class NeighborMessage:
    """Everything one agent can tell a 1-hop neighbor in one round.

    ``relayed_states``/``relayed_inputs`` cover exactly the sender's 1-hop
    neighborhood at the same instant (zero-delay propagation), and
    ``est_states``/``est_inputs`` are the sender's stacked estimates in the
    sender's own member ordering, re-indexable via ``members``.
    """

    sender: int
    state: np.ndarray
    input: np.ndarray
    relayed_states: Mapping
    relayed_inputs: Mapping
    est_states: np.ndarray
    est_inputs: np.ndarray
    members: tuple

    def __post_init__(self):
        object.__setattr__(
            self, "_member_pos", {m: p for p, m in enumerate(self.members)}
        )

    def estimates_agent(self, l: int) -> bool:
        return l in self._member_pos

    def est_state_block(self, l: int, n_dim: int) -> np.ndarray:
        p = self._member_pos[l]
        blk = self.est_states[p * n_dim : (p + 1) * n_dim]
        if blk.shape[0] != n_dim:
            raise ProtocolError(
                f"sender {self.sender}: estimate block for {l} has wrong size"
            )
        return blk

    def est_input_block(self, l: int, n_dim: int) -> np.ndarray:
        p = self._member_pos[l]
        blk = self.est_inputs[p * n_dim : (p + 1) * n_dim]
        if blk.shape[0] != n_dim:
            raise ProtocolError(
                f"sender {self.sender}: input-estimate block for {l} has wrong size"
            )
        return blk


@dataclass(frozen=True)
class ObserverDerivative:
    """One round's worth of observer updates for a single agent."""

    dx_hat: np.ndarray
    du_hat: np.ndarray
    xi: np.ndarray
    rho: np.ndarray


def _check_messages(msgs: Mapping, nb: KHopNeighborhood) -> None:
    missing = set(nb.one_hop) - set(msgs.keys())
    if missing:
        raise MissingNeighborData(
            f"agent {nb.agent}: no message from neighbors {sorted(missing)}"
        )


def _consensus_signal(
    own: np.ndarray,
    msgs: Mapping,
    nb: KHopNeighborhood,
    est_getter,
    relayed_field: str,
) -> np.ndarray:
    eta = nb.eta
    if eta == 0:
        return np.zeros(0)
    n_dim = own.shape[0] // eta
    out = np.zeros_like(own)
    for b, l in enumerate(nb.members):
        own_blk = own[b * n_dim : (b + 1) * n_dim]
        acc = out[b * n_dim : (b + 1) * n_dim]
        for j in nb.one_hop:
            msg = msgs[j]
            if msg.estimates_agent(l):
                acc += est_getter(msg, l, n_dim) - own_blk
            relayed = getattr(msg, relayed_field).get(l)
            if relayed is not None:
                rel = np.asarray(relayed, dtype=float)
                if rel.shape[0] != n_dim:
                    raise ProtocolError(
                        f"sender {j}: relayed value for {l} has wrong size"
                    )
                acc += rel - own_blk
    return out


def compute_xi(
    state: ObserverState, msgs: Mapping, nb: KHopNeighborhood
) -> np.ndarray:
    """State-correction signal assembled from this round's messages."""
    _check_messages(msgs, nb)
    return _consensus_signal(
        state.x_hat, msgs, nb, NeighborMessage.est_state_block, "relayed_states"
    )


def compute_rho(
    state: ObserverState, msgs: Mapping, nb: KHopNeighborhood
) -> np.ndarray:
    """Input-correction signal; same structure as xi with inputs throughout."""
    _check_messages(msgs, nb)
    return _consensus_signal(
        state.u_hat, msgs, nb, NeighborMessage.est_input_block, "relayed_inputs"
    )


def _block_gains(gains: GainSet, nb: KHopNeighborhood, which: str) -> np.ndarray:
    # Gains are indexed by the *estimated* agent: every estimator of agent l
    # applies omega_l / theta_l / pi_l on its block for l. Cached per
    # (agent, gain) pair since the wiring is static for a given gain set.
    cache = gains.member_gain_cache
    key = (nb.agent, which, nb.members)
    out = cache.get(key)
    if out is not None:
        return out
    vals = getattr(gains, which)
    out = np.array([vals[l - 1] for l in nb.members], dtype=float)
    if np.any(~np.isfinite(out)):
        raise ValueError(
            f"{which} gain missing for a member of agent {nb.agent}'s neighborhood"
        )
    out.setflags(write=False)
    cache[key] = out
    return out


def state_observer_derivative(
    state: ObserverState,
    msgs: Mapping,
    nb: KHopNeighborhood,
    plant: PlantModel,
    gains: GainSet,
    u_hat: Optional[np.ndarray] = None,
    xi: Optional[np.ndarray] = None,
    boundary_layer: Optional[float] = None,
) -> np.ndarray:
    """Time derivative of the stacked state estimate of one agent.

    Per member block: ``f(xh) + A xh + omega_l G xi_l + theta_l sign(G xi_l)
    + uh`` where ``uh`` is the agent's own input estimate for that block.
    """
    if nb.eta == 0:
        return np.zeros(0)
    if u_hat is None:
        u_hat = state.u_hat
    if xi is None:
        xi = compute_xi(state, msgs, nb)
    if not np.isfinite(float(state.x_hat.sum())):
        raise NumericalError(f"agent {nb.agent}: non-finite state estimate")
    n_dim = plant.N
    G = gains.G
    omega = _block_gains(gains, nb, "omega")
    theta = _block_gains(gains, nb, "theta")
    xh = state.x_hat.reshape(nb.eta, n_dim)
    g_xi = xi.reshape(nb.eta, n_dim) @ G.T
    dx = xh @ plant.A.T
    if plant.f is not None:
        for b in range(nb.eta):
            dx[b] += plant.f_eval(xh[b])
    dx += omega[:, None] * g_xi
    dx += theta[:, None] * sign(g_xi, boundary_layer)
    dx += u_hat.reshape(nb.eta, n_dim)
    return dx.reshape(-1)


def input_observer_derivative(
    state: ObserverState,
    msgs: Mapping,
    nb: KHopNeighborhood,
    gains: GainSet,
    rho: Optional[np.ndarray] = None,
    boundary_layer: Optional[float] = None,
) -> np.ndarray:
    """Time derivative of the stacked input estimate: ``pi_l sign(rho_l)``."""
    if nb.eta == 0:
        return np.zeros(0)
    if rho is None:
        rho = compute_rho(state, msgs, nb)
    n_dim = state.u_hat.shape[0] // nb.eta
    pi = _block_gains(gains, nb, "pi")
    du = pi[:, None] * sign(rho.reshape(nb.eta, n_dim), boundary_layer)
    return du.reshape(-1)


def observer_derivative(
    state: ObserverState,
    msgs: Mapping,
    nb: KHopNeighborhood,
    plant: PlantModel,
    gains: GainSet,
    boundary_layer: Optional[float] = None,
) -> ObserverDerivative:
    """Both observer derivatives plus the raw correction signals."""
    xi = compute_xi(state, msgs, nb)
    rho = compute_rho(state, msgs, nb)
    dx = state_observer_derivative(
        state, msgs, nb, plant, gains, xi=xi, boundary_layer=boundary_layer
    )
    du = input_observer_derivative(
        state, msgs, nb, gains, rho=rho, boundary_layer=boundary_layer
    )
    return ObserverDerivative(dx_hat=dx, du_hat=du, xi=xi, rho=rho)


def error_norms(
    state: ObserverState,
    x_truth: np.ndarray,
    u_truth: np.ndarray,
    nb: KHopNeighborhood,
) -> tuple:
    """Euclidean norms of this agent's stacked estimation errors.

    Truth arrays are the harness's global (n, N) views; agents never see
    them.
    """
    if nb.eta == 0:
        return 0.0, 0.0
    x_truth = np.asarray(x_truth, dtype=float)
    u_truth = np.asarray(u_truth, dtype=float)
    members = [m - 1 for m in nb.members]
    ex = x_truth[members].reshape(-1) - state.x_hat
    eu = u_truth[members].reshape(-1) - state.u_hat
    return float(np.linalg.norm(ex)), float(np.linalg.norm(eu))
