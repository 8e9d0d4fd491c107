"""Reference synchronizers: consensus (ATS), ADMM consensus and loop-constrained LS (LC).

All three run in synchronous rounds on a reference timeline. Round ``k``
happens at ``t_start + k * period``. Every algorithm leaves each node with
a corrected clock ``c_hat_i(t) = g_i * t + h_i`` in reference time; the
comparison metrics are computed from ``(g, h)``.

Each recursion is a compact, runnable reading of a one-paragraph
description, so the details below are implementation choices:

* ATS: relative skews from consecutive (sent, received) stamp pairs; the
  link delay is ignored, so a bias of the order of the delay remains.
* ADMM: log-skew consensus by decentralized ADMM with a pull toward each
  node's own clock, using PLL-grade relative skews; phases by average
  consensus on measured (delay-ignoring) virtual-time differences.
* LC: per-link relative skew and offset from the two-way stamps, then
  coordinate-descent sweeps of the log-skew and phase least-squares
  problems with exponentially averaged steps, anchored at a master.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .clock import ClockParams, LinkMeasurements
from .errors import InvalidTopology

PLL_SKEW_STD = 0.5e-6


@dataclass(frozen=True)
class VirtualClock:
    """``c_hat(c) = hat_alpha * c + hat_beta`` applied to a node's local reading ``c``."""

    hat_alpha: float
    hat_beta: float

    def __post_init__(self):
        if not self.hat_alpha > 0:
            raise ValueError("virtual skew must be positive")

    def read(self, local):
        return self.hat_alpha * local + self.hat_beta


@dataclass(frozen=True)
class RelativeObservation:
    """Relative skew ``alpha_i / alpha_j`` and relative phase ``beta_i - beta_j``."""

    alpha_ij: float
    beta_ij: float

    def __post_init__(self):
        if not self.alpha_ij > 0:
            raise ValueError("relative skew must be positive")

    def reversed(self) -> "RelativeObservation":
        return RelativeObservation(1.0 / self.alpha_ij, -self.beta_ij)


def relative_skew_oracle(theta_i: ClockParams, theta_j: ClockParams, rng, std=PLL_SKEW_STD) -> RelativeObservation:
    """True ratio ``alpha_i / alpha_j`` with multiplicative ``N(0, std^2)`` error."""
    ratio = theta_i.alpha / theta_j.alpha
    return RelativeObservation(ratio * (1.0 + std * rng.standard_normal()), theta_i.beta - theta_j.beta)


@dataclass
class BaselineTrace:
    """Per-round state: broadcasts per node so far and the corrected clocks."""

    algorithm: str
    broadcasts: list = field(default_factory=list)
    skews: list = field(default_factory=list)
    offsets: list = field(default_factory=list)
    times: list = field(default_factory=list)

    def record(self, broadcasts, g, h, t):
        self.broadcasts.append(float(np.mean(broadcasts)))
        self.skews.append(np.array(g, dtype=float))
        self.offsets.append(np.array(h, dtype=float))
        self.times.append(float(t))


@dataclass
class _Links:
    """Directed link arrays: ``src[d] -> dst[d]`` for every neighbour pair."""

    src: np.ndarray
    dst: np.ndarray
    delay: np.ndarray
    rounds: list  # per round, directed ids with each receiver at most once


def _directed_links(topology, delays: dict) -> _Links:
    src, dst, dl = [], [], []
    for (i, j) in topology.edges:
        for a, b in ((i, j), (j, i)):
            src.append(a)
            dst.append(b)
            dl.append(delays[(i, j)])
    src = np.array(src, dtype=int)
    dst = np.array(dst, dtype=int)
    per_dst = {}
    for d in np.lexsort((src, dst)):
        per_dst.setdefault(int(dst[d]), []).append(int(d))
    depth = max((len(v) for v in per_dst.values()), default=0)
    rounds = [np.array([v[r] for v in per_dst.values() if len(v) > r], dtype=int) for r in range(depth)]
    return _Links(src, dst, np.array(dl, dtype=float), rounds)


def _clock_arrays(clocks):
    return np.array([c.alpha for c in clocks]), np.array([c.beta for c in clocks])


# -- ATS ---------------------------------------------------------------------------------------------------


@dataclass
class AtsState:
    hat_alpha: np.ndarray
    hat_beta: np.ndarray
    eta: np.ndarray  # per directed link, estimate of alpha_src / alpha_dst
    last_src: np.ndarray
    last_dst: np.ndarray
    seen: np.ndarray


def ats_init(num_nodes, num_links) -> AtsState:
    return AtsState(np.ones(num_nodes), np.zeros(num_nodes), np.ones(num_links), np.zeros(num_links),
                    np.zeros(num_links), np.zeros(num_links, dtype=bool))


def ats_step(state: AtsState, links, ds, c_src, c_dst, sent_alpha, sent_beta, rho_eta=0.6, rho_alpha=0.6,
             rho_o=0.6) -> AtsState:
    """Process one packet per receiver (directed links ``ds``), in place.

    ``c_src`` is the sender's local stamp, ``c_dst`` the receiver's local
    receive stamp and ``sent_*`` the sender's virtual clock at send time.
    """
    i = links.dst[ds]
    first = ~state.seen[ds]
    ratio = np.where(first, 1.0, (c_src - state.last_src[ds]) / np.where(first, 1.0, c_dst - state.last_dst[ds]))
    state.eta[ds] = np.where(first, state.eta[ds], rho_eta * state.eta[ds] + (1 - rho_eta) * ratio)
    state.last_src[ds] = c_src
    state.last_dst[ds] = c_dst
    state.seen[ds] = True
    # skew update only once a relative-skew estimate exists
    upd = ~first
    new_alpha = rho_alpha * state.hat_alpha[i] + (1 - rho_alpha) * state.eta[ds] * sent_alpha
    # the offset update sees the virtual clocks at the (delay-free) receive instant
    own = state.hat_alpha[i] * c_dst + state.hat_beta[i]
    other = sent_alpha * c_src + sent_beta
    state.hat_beta[i] = state.hat_beta[i] + (1 - rho_o) * (other - own)
    # keep the virtual reading continuous when the virtual skew changes
    state.hat_beta[i] = np.where(upd, state.hat_beta[i] + (state.hat_alpha[i] - new_alpha) * c_dst, state.hat_beta[i])
    state.hat_alpha[i] = np.where(upd, new_alpha, state.hat_alpha[i])
    return state


def run_ats(topology, clocks, delays: dict, sigma_w, rng, iterations, period=0.1, t_start=0.0, rho_eta=0.6,
            rho_alpha=0.6, rho_o=0.6) -> BaselineTrace:
    """One broadcast per node per round; receivers take packets in sender-id order."""
    links = _directed_links(topology, delays)
    alpha, beta = _clock_arrays(clocks)
    n = topology.num_nodes
    st = ats_init(n, links.src.size)
    trace = BaselineTrace("ats")
    bc = np.zeros(n)
    trace.record(bc, st.hat_alpha * alpha, st.hat_alpha * beta + st.hat_beta, t_start)
    for k in range(1, iterations + 1):
        t = t_start + k * period
        snap_a, snap_b = st.hat_alpha.copy(), st.hat_beta.copy()
        noise = rng.normal(0.0, sigma_w, links.src.size) if sigma_w > 0 else np.zeros(links.src.size)
        for ds in links.rounds:
            j, i = links.src[ds], links.dst[ds]
            c_src = alpha[j] * t + beta[j]
            c_dst = alpha[i] * (t + links.delay[ds] + noise[ds]) + beta[i]
            ats_step(st, links, ds, c_src, c_dst, snap_a[j], snap_b[j], rho_eta, rho_alpha, rho_o)
        bc += 1
        trace.record(bc, st.hat_alpha * alpha, st.hat_alpha * beta + st.hat_beta, t)
    return trace


# -- ADMM --------------------------------------------------------------------------------------------------


def laplacian_step_size(topology) -> float:
    """Step size ``1 / sqrt(lambda_2 * lambda_max)`` of the graph Laplacian."""
    n = topology.num_nodes
    lap = np.zeros((n, n))
    for i, j in topology.edges:
        lap[i, j] = lap[j, i] = -1.0
        lap[i, i] += 1.0
        lap[j, j] += 1.0
    w = np.linalg.eigvalsh(lap)
    return float(1.0 / np.sqrt(w[1] * w[-1]))


@dataclass
class AdmmState:
    log_gain: np.ndarray  # log of each node's skew correction
    dual: np.ndarray
    offset: np.ndarray  # virtual phase correction


def admm_step(state: AdmmState, topology, log_rel: dict, eps) -> np.ndarray:
    """One ADMM log-skew update from relative quantities only; returns the control ``v``.

    ``log_rel[(i, j)]`` is the observed ``log(alpha_i / alpha_j)``; node i
    knows ``x_j - x_i = log_gain_j - log_gain_i - log_rel[(i, j)]``.
    """
    n = topology.num_nodes
    diff_sum = np.zeros(n)
    for (i, j), lr in log_rel.items():
        dx = state.log_gain[j] - state.log_gain[i] - lr
        diff_sum[i] += dx
        diff_sum[j] -= dx
    deg = np.array([topology.degree(k) for k in range(n)], dtype=float)
    v = (-state.log_gain - state.dual + eps * diff_sum) / (1.0 + 2.0 * eps * deg)
    state.log_gain = state.log_gain + v
    diff_new = np.zeros(n)
    for (i, j), lr in log_rel.items():
        dx = state.log_gain[j] - state.log_gain[i] - lr
        diff_new[i] += dx
        diff_new[j] -= dx
    state.dual = state.dual - eps * diff_new
    return v


def run_admm(topology, clocks, delays: dict, sigma_w, rng, iterations, period=0.1, t_start=0.0, eps=None,
             inner=1, pll_std=PLL_SKEW_STD) -> BaselineTrace:
    """``2 * inner`` broadcasts per node per round (state and dual)."""
    alpha, beta = _clock_arrays(clocks)
    n = topology.num_nodes
    eps = laplacian_step_size(topology) if eps is None else eps
    log_rel = {}
    for (i, j) in topology.edges:
        obs = relative_skew_oracle(clocks[i], clocks[j], rng, pll_std)
        log_rel[(i, j)] = float(np.log(obs.alpha_ij))
    st = AdmmState(np.zeros(n), np.zeros(n), np.zeros(n))
    links = _directed_links(topology, delays)
    deg = np.array([topology.degree(k) for k in range(n)], dtype=float)
    w_edge = 1.0 / (1.0 + np.maximum(deg[links.src], deg[links.dst]))
    trace = BaselineTrace("admm")
    bc = np.zeros(n)
    trace.record(bc, alpha, beta, t_start)
    for k in range(1, iterations + 1):
        t = t_start + k * period
        for _ in range(inner):
            gain_old = np.exp(st.log_gain)
            admm_step(st, topology, log_rel, eps)
            gain = np.exp(st.log_gain)
            # continuity of the virtual clock at the switching instant
            st.offset = st.offset + (gain_old - gain) * (alpha * t + beta)
            noise = rng.normal(0.0, sigma_w, links.src.size) if sigma_w > 0 else np.zeros(links.src.size)
            virt = gain * (alpha * t + beta) + st.offset
            j, i = links.src, links.dst
            recv_local = alpha[i] * (t + links.delay + noise) + beta[i]
            measured = virt[j] - (gain[i] * recv_local + st.offset[i])
            u = np.zeros(n)
            np.add.at(u, i, w_edge * measured)
            st.offset = st.offset + u
            bc += 2
        gain = np.exp(st.log_gain)
        trace.record(bc, gain * alpha, gain * beta + st.offset, t)
    return trace


# -- LC ----------------------------------------------------------------------------------------------------


def pairwise_offsets(m: LinkMeasurements):
    """Least-squares ``c_j = r * c_i + o +/- d`` fit over both directions.

    Returns ``(r, o)`` with ``r ~ alpha_j / alpha_i`` and ``o ~ beta_j - r * beta_i``;
    the symmetric delay term ``d`` is fitted and discarded.
    """
    x = np.concatenate([m.fwd_tx, m.rev_rx])
    y = np.concatenate([m.fwd_rx, m.rev_tx])
    sign = np.concatenate([np.ones(m.k_ij), -np.ones(m.k_ji)])
    x0 = x.mean()
    design = np.column_stack([x - x0, np.ones_like(x), sign])
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    r = coef[0]
    return float(r), float(coef[1] - r * x0)


@dataclass
class LcState:
    log_skew: np.ndarray
    phase: np.ndarray
    step_skew: np.ndarray = None
    step_phase: np.ndarray = None

    def __post_init__(self):
        if self.step_skew is None:
            self.step_skew = np.zeros_like(self.log_skew)
        if self.step_phase is None:
            self.step_phase = np.zeros_like(self.phase)


def lc_step(state: LcState, topology, rel: dict, lam=0.9) -> LcState:
    """One coordinate-descent sweep (node-id order) of the log-skew and phase least squares.

    ``rel[(i, j)] = (r, o)`` relates ``c_j = r c_i + o``. The applied
    update is an exponential average (weight ``lam`` on the previous one) of
    the steps to each coordinate minimizer. Masters keep ``(0, 0)``.
    """
    v, b = state.log_skew, state.phase
    for k in range(topology.num_nodes):
        if topology.is_master(k):
            v[k] = 0.0
            b[k] = 0.0
            continue
        num_v = num_b = den_b = 0.0
        nb = topology.neighbors[k]
        for j in nb:
            if k < j:
                r, o = rel[(k, j)]
                num_v += v[j] - np.log(r)
                # beta_j = r beta_k + o
                num_b += r * (b[j] - o)
                den_b += r * r
            else:
                r, o = rel[(j, k)]
                num_v += v[j] + np.log(r)
                num_b += r * b[j] + o
                den_b += 1.0
        if nb:
            state.step_skew[k] = lam * state.step_skew[k] + (1 - lam) * (num_v / len(nb) - v[k])
            state.step_phase[k] = lam * state.step_phase[k] + (1 - lam) * (num_b / den_b - b[k])
            v[k] += state.step_skew[k]
            b[k] += state.step_phase[k]
    return state


def run_lc(topology, clocks, measurements: dict, iterations, lam=0.9, measurement_packets=None, period=0.1,
           t_start=0.0) -> BaselineTrace:
    """Two broadcasts per node per pass (skew and phase estimates)."""
    if not topology.masters:
        raise InvalidTopology("loop-constrained synchronization needs a master")
    alpha, beta = _clock_arrays(clocks)
    n = topology.num_nodes
    rel = {e: pairwise_offsets(measurements[e]) for e in topology.edges}
    st = LcState(np.zeros(n), np.zeros(n))
    trace = BaselineTrace("lc")
    bc = np.zeros(n) if measurement_packets is None else np.array(measurement_packets, dtype=float)

    def corrected():
        a_hat = np.exp(st.log_skew)
        return alpha / a_hat, (beta - st.phase) / a_hat

    g, h = corrected()
    trace.record(bc, g, h, t_start)
    for k in range(1, iterations + 1):
        lc_step(st, topology, rel, lam)
        bc += 2
        g, h = corrected()
        trace.record(bc, g, h, t_start + k * period)
    return trace
