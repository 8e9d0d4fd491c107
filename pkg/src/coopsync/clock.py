"""Clock model, link delay model and the two-way timestamp exchange simulator."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidClock
from .topology import Topology

SPEED_OF_LIGHT = 299_792_458.0

# skews are rejection-sampled above this floor
MIN_SKEW = 0.5


@dataclass(frozen=True)
class ClockParams:
    """Local clock ``c(t) = alpha * t + beta`` (alpha: skew, beta: phase in s)."""

    alpha: float
    beta: float

    def __post_init__(self):
        if not self.alpha > 0:
            raise InvalidClock(f"clock skew must be positive, got {self.alpha}")


MASTER_CLOCK = ClockParams(1.0, 0.0)


@dataclass(frozen=True)
class TransformedParams:
    """Inverse skew ``lam = 1/alpha`` and scaled phase ``nu = beta/alpha``."""

    lam: float
    nu: float

    def __post_init__(self):
        if not self.lam > 0:
            raise InvalidClock(f"inverse skew must be positive, got {self.lam}")

    def as_array(self) -> np.ndarray:
        return np.array([self.lam, self.nu])


@dataclass(frozen=True)
class LinkDelayModel:
    t_c: float = 7.6e-6
    speed: float = SPEED_OF_LIGHT
    sigma_w: float = 93e-9

    def __post_init__(self):
        if self.sigma_w < 0 or self.t_c < 0 or self.speed <= 0:
            raise ValueError("delay model parameters must be non-negative (speed positive)")


@dataclass(frozen=True)
class LinkMeasurements:
    """Every timestamp exchanged on link ``(node_i, node_j)``.

    ``fwd_tx``/``rev_rx`` are read from node i's clock, ``fwd_rx``/``rev_tx``
    from node j's clock.
    """

    node_i: int
    node_j: int
    fwd_tx: np.ndarray
    fwd_rx: np.ndarray
    rev_tx: np.ndarray
    rev_rx: np.ndarray

    def __post_init__(self):
        for name in ("fwd_tx", "fwd_rx", "rev_tx", "rev_rx"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.fwd_tx.shape != self.fwd_rx.shape or self.rev_tx.shape != self.rev_rx.shape:
            raise ValueError("transmit and receive stamp vectors must have equal length")
        if self.k_ij < 1 or self.k_ji < 1:
            raise ValueError("each direction needs at least one packet")
        if np.any(np.diff(self.fwd_tx) <= 0) or np.any(np.diff(self.rev_tx) <= 0):
            raise ValueError("transmit stamps must be strictly increasing")

    @property
    def k_ij(self) -> int:
        return self.fwd_tx.size

    @property
    def k_ji(self) -> int:
        return self.rev_tx.size

    def reversed(self) -> "LinkMeasurements":
        """Same data seen from node j's side."""
        return LinkMeasurements(self.node_j, self.node_i, self.rev_tx, self.rev_rx, self.fwd_tx, self.fwd_rx)

    def stamps_of(self, node: int) -> np.ndarray:
        """All stamps read from ``node``'s clock."""
        if node == self.node_i:
            return np.concatenate([self.fwd_tx, self.rev_rx])
        if node == self.node_j:
            return np.concatenate([self.fwd_rx, self.rev_tx])
        raise KeyError(node)


def local_time(theta: ClockParams, t):
    return theta.alpha * t + theta.beta


def to_transformed(theta: ClockParams) -> TransformedParams:
    if not theta.alpha > 0:
        raise InvalidClock("alpha must be positive")
    return TransformedParams(1.0 / theta.alpha, theta.beta / theta.alpha)


def from_transformed(v: TransformedParams) -> ClockParams:
    return ClockParams(1.0 / v.lam, v.nu / v.lam)


def propagation_delay(topology: Topology, delay_model: LinkDelayModel, edge) -> float:
    i, j = edge
    return delay_model.t_c + topology.distance(i, j) / delay_model.speed


def alternating_schedule(start, k_ij, k_ji, spacing):
    """Reference-time send instants for one link.

    Forward and reverse packets alternate (forward first) with ``spacing``
    between consecutive packets; surplus packets of the longer direction follow
    at the same spacing. Returns ``(fwd_times, rev_times, next_free_time)``.
    """
    fwd, rev = [], []
    t = start
    for k in range(max(k_ij, k_ji)):
        if k < k_ij:
            fwd.append(t)
            t += spacing
        if k < k_ji:
            rev.append(t)
            t += spacing
    return np.array(fwd), np.array(rev), t


def simulate_link_exchange(theta_i, theta_j, delta_ij, fwd_times, rev_times, sigma_w, rng, node_i=0, node_j=1):
    """Noisy two-way exchange on one link.

    Forward noise is drawn first, then reverse noise, so a given rng state maps
    to a unique set of stamps.
    """
    fwd_times = np.asarray(fwd_times, dtype=float)
    rev_times = np.asarray(rev_times, dtype=float)
    w_f = rng.normal(0.0, sigma_w, fwd_times.size) if sigma_w > 0 else np.zeros(fwd_times.size)
    w_r = rng.normal(0.0, sigma_w, rev_times.size) if sigma_w > 0 else np.zeros(rev_times.size)
    return LinkMeasurements(
        node_i,
        node_j,
        fwd_tx=theta_i.alpha * fwd_times + theta_i.beta,
        fwd_rx=theta_j.alpha * (fwd_times + delta_ij + w_f) + theta_j.beta,
        rev_tx=theta_j.alpha * rev_times + theta_j.beta,
        rev_rx=theta_i.alpha * (rev_times + delta_ij + w_r) + theta_i.beta,
    )


def sample_clocks(topology: Topology, sigma_alpha_sq, phase_interval, rng) -> list:
    """Masters get the reference clock; agents draw skew and phase.

    Skew ~ N(1, sigma_alpha_sq) truncated to ``alpha > MIN_SKEW``; phase is
    uniform on ``phase_interval``. Draw order: per agent, skew then phase.
    """
    lo, hi = phase_interval
    sd = float(np.sqrt(sigma_alpha_sq))
    clocks = []
    for node in range(topology.num_nodes):
        if topology.is_master(node):
            clocks.append(MASTER_CLOCK)
            continue
        alpha = 1.0 + sd * rng.standard_normal()
        while alpha <= MIN_SKEW:
            alpha = 1.0 + sd * rng.standard_normal()
        beta = rng.uniform(lo, hi)
        clocks.append(ClockParams(float(alpha), float(beta)))
    return clocks


def link_schedules(topology: Topology, k_ij, k_ji, spacing, start=None):
    """Sequential per-link schedules in edge-id order on one reference timeline."""
    t = spacing if start is None else start
    out = {}
    for edge in topology.edges:
        fwd, rev, t = alternating_schedule(t, k_ij, k_ji, spacing)
        out[edge] = (fwd, rev)
    return out


def simulate_network(topology, clocks, delay_model, k_ij, k_ji, spacing, rng, start=None) -> dict:
    """Measure every link once, in edge-id order. Returns ``{edge: LinkMeasurements}``."""
    schedules = link_schedules(topology, k_ij, k_ji, spacing, start)
    out = {}
    for edge in topology.edges:
        i, j = edge
        fwd, rev = schedules[edge]
        delta = propagation_delay(topology, delay_model, edge)
        out[edge] = simulate_link_exchange(clocks[i], clocks[j], delta, fwd, rev, delay_model.sigma_w, rng, i, j)
    return out


def node_epochs(topology: Topology, measurements: dict) -> np.ndarray:
    """Per-node reference epoch: the mean of every stamp the node recorded.

    Each node can compute this from its own clock readings alone.
    """
    sums = np.zeros(topology.num_nodes)
    counts = np.zeros(topology.num_nodes)
    for (i, j), m in measurements.items():
        for node in (i, j):
            s = m.stamps_of(node)
            sums[node] += s.sum()
            counts[node] += s.size
    return np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)
