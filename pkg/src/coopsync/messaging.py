"""Gaussian belief propagation and mean-field synchronizers.

All messages live in the epoch-shifted coordinates of the node they concern
(see :mod:`coopsync.statmodel`). Masters never compute; their fixed value is
used directly by the neighbouring factors.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .clock import ClockParams, from_transformed, TransformedParams
from .errors import DegenerateMessage, InvalidSkew, NotConverged, SingularBelief
from .gaussian import GaussianNat, is_singular, product
from .statmodel import LinkMatrices, from_local, shift_gaussian, to_local

BP = "bp"
MF = "mf"
PARALLEL = "parallel"
SERIAL = "serial"


def bp_factor_to_variable(lm: LinkMatrices, ext_j: GaussianNat | None = None, master_neighbor=False,
                          master_value=None, rcond=1e-14) -> GaussianNat:
    """Message from factor ``p_ij`` to node i (``lm`` oriented with A for node i).

    The agent case is the Schur complement of ``[[A^T A, A^T B], [B^T A,
    B^T B + Lambda_ext]]`` onto node i. It is formed from a QR factorization
    of the stacked square roots so that no large terms are subtracted.
    """
    if master_neighbor:
        if master_value is None:
            raise ValueError("master neighbour requires its fixed value")
        mv = master_value.as_array() if isinstance(master_value, TransformedParams) else np.asarray(master_value)
        return GaussianNat(lm.aa, -lm.ab @ mv)
    if ext_j is None:
        ext_j = GaussianNat.uninformative()
    r0 = np.zeros((1, 4, 4))
    r0[0, : lm.r_factor.shape[0]] = lm.r_factor
    try:
        p, h = _batched_schur(r0, ext_j.precision[None], ext_j.info[None], rcond)
    except DegenerateMessage:
        raise DegenerateMessage(f"no information through link ({lm.node_i}, {lm.node_j})") from None
    return GaussianNat(p[0], h[0])


def bp_variable_to_factor(prior: GaussianNat, incoming) -> GaussianNat:
    """Extrinsic message: prior times every incoming message except the target's."""
    return product(prior, *incoming)


def bp_belief(prior: GaussianNat, incoming) -> GaussianNat:
    b = product(prior, *incoming)
    if is_singular(b.precision):
        raise SingularBelief("belief precision is singular")
    return b


def mf_factor_to_variable(lm: LinkMatrices, neighbor_mean) -> GaussianNat:
    mu = neighbor_mean.as_array() if isinstance(neighbor_mean, TransformedParams) else np.asarray(neighbor_mean)
    return GaussianNat(lm.aa, -lm.ab @ mu)


def mf_belief(prior: GaussianNat, incoming) -> GaussianNat:
    return bp_belief(prior, incoming)


def extract_clock_estimate(belief: GaussianNat, epoch=0.0) -> ClockParams:
    """Skew and phase from a belief over epoch-shifted ``(lam, nu)``."""
    lam, nu = from_local(belief.mean, epoch)
    if not lam > 0:
        raise InvalidSkew(f"estimated inverse skew {lam} is not positive")
    return from_transformed(TransformedParams(float(lam), float(nu)))


@dataclass
class MessageState:
    """Messages in flight, keyed by directed edge ``(sender, receiver)``."""

    bp_extrinsic: dict = field(default_factory=dict)
    bp_intrinsic: dict = field(default_factory=dict)
    mf_beliefs: dict = field(default_factory=dict)
    iteration: int = 0


@dataclass
class TraceRow:
    iteration: int
    node: int
    mean_lambda: float
    mean_nu: float
    var_lambda: float
    var_nu: float
    mean_change: float


@dataclass
class SyncResult:
    """Outcome of one synchronization run.

    ``beliefs`` are in epoch-shifted coordinates; ``estimates`` are plain
    clock parameters. ``changes[t]`` is the max belief-mean change at
    iteration ``t + 1``; ``traces[node][t]`` the belief-covariance trace.
    ``mean_history[t]`` holds the agents' belief means ``(lam, nu)`` in
    plain coordinates (rows ordered as ``agents``) and
    ``broadcast_history[t]`` the network-wide broadcast count. An estimate
    is ``None`` only for a run that neither converged nor was asked to raise
    and whose belief holds no valid clock.
    """

    algorithm: str
    beliefs: dict
    estimates: dict
    epochs: np.ndarray
    changes: list
    traces: dict
    iterations_run: int
    converged: bool
    broadcasts: np.ndarray
    trace_rows: list = field(default_factory=list)
    state: MessageState | None = None
    agents: tuple = ()
    mean_history: list = field(default_factory=list)
    broadcast_history: list = field(default_factory=list)

    @property
    def iterations_to_converge(self) -> int | None:
        """Iterations after which no belief mean moved by more than the tolerance."""
        return self.iterations_run if self.converged else None


def _levels(topology, initiator):
    sources = topology.masters if topology.masters else frozenset({initiator})
    return topology.hop_distances(sources)


def _batched_sqrt_info(p, h):
    """Rows ``L`` and targets ``y`` with ``L^T L = p`` and ``L^T y = h``."""
    w, v = np.linalg.eigh(p)
    w = np.clip(w, 0.0, None)
    s = np.sqrt(w)
    keep = w > 1e-300
    inv_s = np.where(keep, 1.0 / np.where(keep, s, 1.0), 0.0)
    vt = np.swapaxes(v, -1, -2)
    return vt * s[..., :, None], inv_s * (vt @ h[..., None])[..., 0]


def _batched_schur(r0, ext_p, ext_h, rcond=1e-14):
    """Vectorized agent rule of :func:`bp_factor_to_variable`.

    The extrinsic information enters as an extra QR column, so the outgoing
    information vector is read off the triangular factor instead of being
    formed from large cancelling products.
    """
    nb = r0.shape[0]
    w = np.zeros((nb, 6, 5))
    w[:, :4, :4] = r0
    sq, y = _batched_sqrt_info(ext_p, ext_h)
    w[:, 4:, :2] = sq
    w[:, 4:, 4] = -y
    r = np.linalg.qr(w, mode="r")
    r11, r22, r2c = r[:, :2, :2], r[:, 2:4, 2:4], r[:, 2:4, 4]
    d = np.abs(np.diagonal(r11, axis1=1, axis2=2))
    if np.any(d.min(axis=1) <= rcond * np.maximum(d.max(axis=1), 1e-300)):
        raise DegenerateMessage("no information through a link")
    r22t = np.swapaxes(r22, 1, 2)
    prec = r22t @ r22
    info = -(r22t @ r2c[..., None])[..., 0]
    return 0.5 * (prec + np.swapaxes(prec, 1, 2)), info


def _batched_moments(p, h):
    """Means and covariances of a stack of 2x2 information-form Gaussians."""
    d = np.sqrt(np.abs(np.diagonal(p, axis1=1, axis2=2)))
    d = np.where(d > 0, d, 1.0)
    outer = d[:, :, None] * d[:, None, :]
    ps = p / outer
    det = ps[:, 0, 0] * ps[:, 1, 1] - ps[:, 0, 1] * ps[:, 1, 0]
    if np.any(det <= 1e-12 * np.abs(ps[:, 0, 0] * ps[:, 1, 1])):
        raise SingularBelief("belief precision is singular")
    inv = np.linalg.inv(ps) / outer
    inv = 0.5 * (inv + np.swapaxes(inv, 1, 2))
    return (inv @ h[..., None])[..., 0], inv


def _pad_index(groups, pad):
    width = max((len(g) for g in groups), default=0)
    out = np.full((len(groups), max(width, 1)), pad, dtype=int)
    for k, g in enumerate(groups):
        out[k, : len(g)] = g
    return out


def run_sync(topology, link_mats: dict, priors: dict, epochs, algorithm=BP, schedule=PARALLEL, max_iter=200,
             tol=1e-9, damping=1.0, initiator=0, master_values: dict | None = None, measurement_packets=None,
             trace=False, raise_on_fail=True) -> SyncResult:
    """Iterate BP or MF until belief means settle.

    ``link_mats`` maps each edge ``(i, j)`` (``i < j``) to its
    :class:`LinkMatrices`; ``priors`` maps every agent to its prior;
    ``master_values`` holds each master's fixed value in its own coordinates.
    ``measurement_packets`` (per-node counts) seeds the broadcast counter.

    Parallel: every agent updates from the previous iteration's messages.
    Serial: agents at hop distance ``l`` from the masters (or from
    ``initiator`` without masters) join at iteration ``l``; within an
    iteration the active agents update one at a time in (hop level, node id)
    order, each seeing the messages its predecessors just sent.
    """
    if algorithm not in (BP, MF):
        raise ValueError(f"unknown algorithm {algorithm!r}")
    if schedule not in (PARALLEL, SERIAL):
        raise ValueError(f"unknown schedule {schedule!r}")
    if not 0.0 < damping <= 1.0:
        raise ValueError("damping must lie in (0, 1]")
    epochs = np.asarray(epochs, dtype=float)
    n = topology.num_nodes
    masters = topology.masters
    agents = list(topology.agents)
    na = len(agents)
    aidx = {a: k for k, a in enumerate(agents)}
    mvals = dict(master_values or {})
    for m in masters:
        mvals.setdefault(m, to_local([1.0, 0.0], epochs[m]))
    missing = [e for e in topology.edges if e not in link_mats]
    if missing:
        raise ValueError(f"no link matrices for edges {missing}")

    # directed factor messages (sender -> agent receiver)
    send, recv, r0s, aas, abs_ = [], [], [], [], []
    for (i, j) in topology.edges:
        lm = link_mats[(i, j)]
        for s_, r_, o in ((j, i, lm), (i, j, lm.flipped())):
            if r_ in masters:
                continue
            send.append(s_)
            recv.append(r_)
            r0 = o.r_factor
            pad = np.zeros((4, 4))
            pad[: r0.shape[0]] = r0
            r0s.append(pad)
            aas.append(o.aa)
            abs_.append(o.ab)
    nd = len(send)
    send = np.array(send, dtype=int)
    recv = np.array(recv, dtype=int)
    r0s = np.array(r0s).reshape(nd, 4, 4)
    aas = np.array(aas).reshape(nd, 2, 2)
    abs_ = np.array(abs_).reshape(nd, 2, 2)
    from_master = np.array([s_ in masters for s_ in send], dtype=bool)
    master_in_h = np.zeros((nd, 2))
    for d in np.flatnonzero(from_master):
        master_in_h[d] = -abs_[d] @ mvals[int(send[d])]
    send_a = np.array([aidx.get(int(s_), -1) for s_ in send], dtype=int)
    recv_a = np.array([aidx[int(r_)] for r_ in recv], dtype=int)
    # incoming message ids per agent, and per directed message the ids feeding its sender's extrinsic
    into = [[d for d in range(nd) if recv_a[d] == k] for k in range(na)]
    into_idx = _pad_index(into, nd)
    others = [[e for e in into[send_a[d]] if send[e] != recv[d]] if send_a[d] >= 0 else [] for d in range(nd)]
    others_idx = _pad_index(others, nd)

    prior_p = np.array([priors[a].precision for a in agents]).reshape(na, 2, 2)
    prior_h = np.array([priors[a].info for a in agents]).reshape(na, 2)
    levels = _levels(topology, initiator)
    agent_levels = np.array([levels[a] for a in agents], dtype=int)
    if schedule == PARALLEL:
        groups = [np.arange(na)]
        group_levels = np.zeros(1, dtype=int)
    else:
        # one agent at a time, ordered by hop level then node id
        order = np.lexsort((np.array(agents, dtype=int), agent_levels)) if na else np.zeros(0, dtype=int)
        groups = [np.array([k]) for k in order]
        group_levels = agent_levels[order]
    broadcasts = np.zeros(n, dtype=int) if measurement_packets is None else np.array(measurement_packets, dtype=int)

    # message stores; the extra last row is the zero padding entry
    in_p = np.zeros((nd + 1, 2, 2))
    in_h = np.zeros((nd + 1, 2))
    has_in = np.zeros(nd, dtype=bool)
    ext_p = np.zeros((nd, 2, 2))
    ext_h = np.zeros((nd, 2))
    has_ext = np.zeros(nd, dtype=bool)
    active = np.zeros(na, dtype=bool) if schedule == SERIAL else np.ones(na, dtype=bool)
    emitted = np.zeros(na, dtype=bool) if schedule == SERIAL else np.ones(na, dtype=bool)

    mf_h_master = np.array([master_in_h[into[k]].sum(axis=0) if into[k] else np.zeros(2) for k in range(na)])
    bel_p, bel_h = prior_p.copy(), prior_h.copy()
    means, covs = _batched_moments(bel_p, bel_h)

    def set_in(ds, p, h):
        if damping != 1.0:
            old = has_in[ds]
            p = np.where(old[:, None, None], damping * p + (1 - damping) * in_p[ds], p)
            h = np.where(old[:, None], damping * h + (1 - damping) * in_h[ds], h)
        in_p[ds] = p
        in_h[ds] = h
        has_in[ds] = True

    def bp_receive(ds_master, ds_agent):
        """Refresh the factor messages with the given directed ids."""
        if ds_master.size:
            set_in(ds_master, aas[ds_master], master_in_h[ds_master])
        ds = ds_agent[has_ext[ds_agent]]
        if ds.size:
            p, h = _batched_schur(r0s[ds], ext_p[ds], ext_h[ds])
            set_in(ds, p, h)

    def bp_emit(ds):
        if ds.size:
            ext_p[ds] = prior_p[send_a[ds]] + in_p[others_idx[ds]].sum(axis=1)
            ext_h[ds] = prior_h[send_a[ds]] + in_h[others_idx[ds]].sum(axis=1)
            has_ext[ds] = True

    all_master = np.flatnonzero(from_master)
    all_agent = np.flatnonzero(~from_master)
    in_master = [np.array([d for d in into[k] if from_master[d]], dtype=int) for k in range(na)]
    in_agent = [np.array([d for d in into[k] if not from_master[d]], dtype=int) for k in range(na)]
    out_of = [np.flatnonzero(send_a == k) for k in range(na)]

    abs_pad = np.concatenate([abs_, np.zeros((1, 2, 2))])
    aas_pad = np.concatenate([aas, np.zeros((1, 2, 2))])
    send_pad = np.append(np.where(send_a >= 0, send_a, 0), 0)
    agent_sender = np.append(~from_master & (send_a >= 0), False)
    master_sender = np.append(from_master, False)

    def mf_update(ks, mu):
        # only neighbours that have spoken contribute
        ok = agent_sender & emitted[send_pad]
        idx = into_idx[ks]
        c = -(abs_pad[idx] @ mu[send_pad[idx]][..., None])[..., 0] * ok[idx][..., None]
        h = prior_h[ks] + mf_h_master[ks] + c.sum(axis=1)
        used = (ok | master_sender)[idx]
        p = prior_p[ks] + (aas_pad[idx] * used[..., None, None]).sum(axis=1)
        if damping != 1.0:
            h = damping * h + (1 - damping) * bel_h[ks]
            p = damping * p + (1 - damping) * bel_p[ks]
        bel_h[ks] = h
        bel_p[ks] = p

    changes, rows, history, b_history = [], [], [], []
    agent_epochs = epochs[agents] if na else np.zeros(0)
    traces = {a: [] for a in agents}
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        if schedule == SERIAL:
            active = agent_levels <= it
            run_groups = [g for g, lv in zip(groups, group_levels) if lv <= it]
        else:
            run_groups = groups
        if algorithm == BP:
            if schedule == PARALLEL:
                bp_emit(all_agent)
                bp_receive(all_master, all_agent)
            else:
                for g in run_groups:
                    k = int(g[0])
                    bp_receive(in_master[k], in_agent[k])
                    bp_emit(out_of[k])
                    emitted[k] = True
            bel_p = prior_p + in_p[into_idx].sum(axis=1)
            bel_h = prior_h + in_h[into_idx].sum(axis=1)
        else:
            if schedule == PARALLEL:
                mf_update(np.arange(na), means.copy())
            else:
                mu = means.copy()
                for g in run_groups:
                    mf_update(g, mu)
                    emitted[g] = True
                    mu[g], _ = _batched_moments(bel_p[g], bel_h[g])
        for g in run_groups:
            broadcasts[[agents[k] for k in g]] += 1
        new_means, covs = _batched_moments(bel_p, bel_h)
        delta = np.max(np.abs(new_means - means), axis=1) if na else np.zeros(0)
        change = float(delta.max(initial=0.0))
        tr = covs[:, 0, 0] + covs[:, 1, 1]
        plain = new_means.copy()
        plain[:, 1] += plain[:, 0] * agent_epochs
        history.append(plain)
        b_history.append(int(broadcasts.sum()))
        for k, a in enumerate(agents):
            traces[a].append(float(tr[k]))
        if trace:
            for k, a in enumerate(agents):
                g = shift_gaussian(GaussianNat(bel_p[k], bel_h[k]), -epochs[a])
                c = g.cov
                mu = from_local(new_means[k], epochs[a])
                rows.append(TraceRow(it, a, float(mu[0]), float(mu[1]), float(c[0, 0]), float(c[1, 1]),
                                     float(delta[k])))
        means = new_means
        changes.append(change)
        if change < tol and bool(active.all()) and bool(emitted.all()):
            converged = True
            break

    beliefs = {a: GaussianNat(bel_p[k], bel_h[k]) for k, a in enumerate(agents)}
    estimates = {}
    for a in agents:
        try:
            estimates[a] = extract_clock_estimate(beliefs[a], epochs[a])
        except (InvalidSkew, SingularBelief):
            # a diverged run has no valid clock; keep its traces for inspection
            if raise_on_fail or converged:
                raise
            estimates[a] = None
    state = MessageState(
        bp_extrinsic={(int(send[d]), int(recv[d])): GaussianNat(ext_p[d], ext_h[d]) for d in np.flatnonzero(has_ext)},
        bp_intrinsic={(int(send[d]), int(recv[d])): GaussianNat(in_p[d], in_h[d]) for d in np.flatnonzero(has_in)},
        mf_beliefs=dict(beliefs) if algorithm == MF else {},
        iteration=it,
    )
    result = SyncResult(algorithm, beliefs, estimates, epochs, changes, traces, it, converged, broadcasts, rows,
                        state, tuple(agents), history, b_history)
    if not converged and raise_on_fail:
        last = changes[-1] if changes else float("nan")
        raise NotConverged(f"{algorithm} did not converge in {max_iter} iterations (last change {last:.3g})",
                           result=result)
    return result
