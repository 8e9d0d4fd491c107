"""Bayesian Cramer-Rao bound on per-node skew and phase.

The Fisher information is taken for ``theta = (alpha, beta)`` given known
link delays. Receive stamps are Gaussian around their noise-free value with
standard deviation ``alpha_rx * sigma_w``; transmit stamps are conditioned
on. With ``tau`` the reference-time instant of a stamp, the derivatives of
the receive-stamp mean are linear in ``tau``, so the blocks only need the
schedule, the delays and moments of the inverse skews.

Internally each node uses a reference instant ``e_i`` and the phase at that
instant, ``beta_i + alpha_i e_i``; this keeps ``J`` well conditioned for
long experiments. The result is mapped back to ``(alpha, beta)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SingularFisher
from .gaussian import is_singular


def inv_skew_moments(mu_alpha=1.0, sigma_alpha_sq=0.0):
    """Approximate ``E[1/alpha^n]``, n = 1..4, for ``alpha ~ N(mu_alpha, sigma_alpha_sq)`` near one."""
    if sigma_alpha_sq < 0:
        raise ValueError("sigma_alpha_sq must be non-negative")
    e1 = 2.0 - mu_alpha
    s = sigma_alpha_sq
    return (e1, s + e1**2, e1**3 + 3 * e1 * s, e1**4 + 6 * e1**2 * s + 3 * s**2)


@dataclass(frozen=True)
class LinkSchedule:
    """Reference-time send instants of one link and its delay."""

    node_i: int
    node_j: int
    fwd_times: np.ndarray
    rev_times: np.ndarray
    delta: float


def _outer_sum(x, y):
    """``sum_k [[x_k y_k, x_k], [y_k, 1]]``"""
    return np.array([[np.sum(x * y), np.sum(x)], [np.sum(y), float(len(x))]])


def fisher_likelihood_blocks(link: LinkSchedule, sigma_w, moments_i, moments_j, ref_i=0.0, ref_j=0.0):
    """Expected Fisher contributions of one link.

    Returns ``(J_ii, J_jj, J_ij)`` in the (skew, phase-at-reference) order,
    averaged over the skews with ``moments_*`` from :func:`inv_skew_moments`
    (use ``(1, 1, 1, 1)`` for a known unit-skew node).
    """
    s2 = sigma_w**2
    t_f = np.asarray(link.fwd_times, dtype=float)
    t_r = np.asarray(link.rev_times, dtype=float)
    e1_i, e2_i = moments_i[0], moments_i[1]
    e1_j, e2_j = moments_j[0], moments_j[1]
    # forward packets: i transmits at t, j receives at t + delta
    f0, f1 = t_f - ref_i, t_f + link.delta - ref_j
    # reverse packets: j transmits at t, i receives at t + delta
    r0, r1 = t_r - ref_j, t_r + link.delta - ref_i
    var_term = np.array([[2.0, 0.0], [0.0, 0.0]])
    j_ii = e2_i / s2 * (_outer_sum(f0, f0) + _outer_sum(r1, r1)) + e2_i * len(t_r) * var_term
    j_jj = e2_j / s2 * (_outer_sum(f1, f1) + _outer_sum(r0, r0)) + e2_j * len(t_f) * var_term
    j_ij = -e1_i * e1_j / s2 * (_outer_sum(f0, f1) + _outer_sum(r0, r1).T)
    return j_ii, j_jj, j_ij


def _prior_info(sigma_alpha_sq, sigma_beta_sq, ref):
    """Prior information for ``(alpha, beta + alpha * ref)``."""
    cov = np.diag([sigma_alpha_sq, sigma_beta_sq])
    m = np.array([[1.0, 0.0], [ref, 1.0]])
    return np.linalg.inv(m @ cov @ m.T)


def fisher_matrix(topology, schedules: dict, sigma_w, sigma_alpha_sq, sigma_beta_sq, mu_alpha=1.0, refs=None,
                  include_prior=True):
    """Assemble ``J = E[J_l] + J_p`` over the agents.

    ``schedules`` maps each edge to a :class:`LinkSchedule`. Master parameters
    are known and do not appear in ``J``. Returns ``(J, agents, refs)``.
    """
    agents = list(topology.agents)
    pos = {a: k for k, a in enumerate(agents)}
    refs = _default_refs(topology, schedules) if refs is None else np.asarray(refs, dtype=float)
    mom_agent = inv_skew_moments(mu_alpha, sigma_alpha_sq)
    mom_master = (1.0, 1.0, 1.0, 1.0)
    dim = 2 * len(agents)
    j = np.zeros((dim, dim))
    for (a, b), link in schedules.items():
        mi = mom_master if topology.is_master(a) else mom_agent
        mj = mom_master if topology.is_master(b) else mom_agent
        j_ii, j_jj, j_ij = fisher_likelihood_blocks(link, sigma_w, mi, mj, refs[a], refs[b])
        sa = slice(2 * pos[a], 2 * pos[a] + 2) if a in pos else None
        sb = slice(2 * pos[b], 2 * pos[b] + 2) if b in pos else None
        if sa is not None:
            j[sa, sa] += j_ii
        if sb is not None:
            j[sb, sb] += j_jj
        if sa is not None and sb is not None:
            j[sa, sb] += j_ij
            j[sb, sa] += j_ij.T
    if include_prior:
        for a in agents:
            sl = slice(2 * pos[a], 2 * pos[a] + 2)
            j[sl, sl] += _prior_info(sigma_alpha_sq, sigma_beta_sq, refs[a])
    return 0.5 * (j + j.T), agents, refs


def _default_refs(topology, schedules):
    """Per-node mean of its stamp instants in reference time."""
    sums = np.zeros(topology.num_nodes)
    counts = np.zeros(topology.num_nodes)
    for (a, b), link in schedules.items():
        ta = np.concatenate([link.fwd_times, link.rev_times + link.delta])
        tb = np.concatenate([link.fwd_times + link.delta, link.rev_times])
        sums[a] += ta.sum()
        counts[a] += ta.size
        sums[b] += tb.sum()
        counts[b] += tb.size
    return np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)


@dataclass(frozen=True)
class NodeBound:
    skew: float
    phase: float

    @property
    def skew_ppm(self) -> float:
        return self.skew * 1e6


def bcrb(topology, schedules: dict, sigma_w, sigma_alpha_sq, sigma_beta_sq, mu_alpha=1.0) -> dict:
    """Per-agent RMSE lower bounds ``sqrt(diag J^-1)`` on skew and phase."""
    j, agents, refs = fisher_matrix(topology, schedules, sigma_w, sigma_alpha_sq, sigma_beta_sq, mu_alpha)
    if not agents:
        return {}
    d = np.sqrt(np.abs(np.diag(j)))
    if np.any(d == 0) or is_singular(j, 1e-15):
        raise SingularFisher("Fisher information is singular")
    try:
        c = np.linalg.inv(j / np.outer(d, d)) / np.outer(d, d)
    except np.linalg.LinAlgError as exc:
        raise SingularFisher(str(exc)) from exc
    out = {}
    for k, a in enumerate(agents):
        block = c[2 * k:2 * k + 2, 2 * k:2 * k + 2]
        # back from (alpha, beta + alpha e) to (alpha, beta)
        m = np.array([[1.0, 0.0], [-refs[a], 1.0]])
        block = m @ block @ m.T
        if block[0, 0] <= 0 or block[1, 1] <= 0:
            raise SingularFisher(f"non-positive bound at node {a}")
        out[a] = NodeBound(float(np.sqrt(block[0, 0])), float(np.sqrt(block[1, 1])))
    return out


def schedules_for(topology, delay_model, k_ij, k_ji, spacing, start=None) -> dict:
    """Link schedules matching :func:`coopsync.clock.simulate_network`."""
    from .clock import link_schedules, propagation_delay

    raw = link_schedules(topology, k_ij, k_ji, spacing, start)
    return {
        e: LinkSchedule(e[0], e[1], fwd, rev, propagation_delay(topology, delay_model, e)) for e, (fwd, rev) in raw.items()
    }
