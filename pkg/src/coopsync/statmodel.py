"""Gaussian statistical model of the two-way exchange.

Every node works in epoch-shifted coordinates: the stamps node i records are
taken relative to its own epoch ``e_i`` (see :func:`coopsync.clock.node_epochs`).
For transformed parameters ``(lam, nu)`` the shift is the linear map

    lam' = lam,    nu' = nu - lam * e_i

so a Gaussian stays Gaussian and ``beta = nu' / lam + e_i``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.linalg

from .clock import ClockParams, LinkMeasurements, TransformedParams, to_transformed
from .errors import DegenerateLink, SingularPosterior
from .gaussian import GaussianNat, is_singular
from .topology import Topology

# precision of the optional Gaussian stand-in for a master's fixed value
MASTER_SURROGATE_PRECISION = 1e12
# variance of the "uninformative" phase prior
UNINFORMATIVE_PHASE_VAR = 1e12


def shift_matrix(epoch) -> np.ndarray:
    """``T`` with ``theta' = T theta`` for a node epoch."""
    return np.array([[1.0, 0.0], [-epoch, 1.0]])


def to_local(v, epoch) -> np.ndarray:
    """Transformed parameters (object or array) -> epoch-shifted array."""
    v = v.as_array() if isinstance(v, TransformedParams) else np.asarray(v, dtype=float)
    return np.array([v[0], v[1] - v[0] * epoch])


def clock_to_local(theta: ClockParams, epoch) -> np.ndarray:
    """``(1/alpha, (beta - epoch)/alpha)``: :func:`to_local` of the transformed
    parameters without forming ``beta/alpha`` first."""
    return np.array([1.0 / theta.alpha, (theta.beta - epoch) / theta.alpha])


def from_local(v, epoch) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return np.array([v[0], v[1] + v[0] * epoch])


def shift_gaussian(g: GaussianNat, epoch) -> GaussianNat:
    """Express a Gaussian over ``theta`` in shifted coordinates ``T theta``."""
    t_inv = np.array([[1.0, 0.0], [epoch, 1.0]])
    return GaussianNat(t_inv.T @ g.precision @ t_inv, t_inv.T @ g.info)


@dataclass(frozen=True)
class DelayStats:
    a_i: float
    a_j: float
    b_ij: float


def delay_stats(m: LinkMeasurements, epoch_i=0.0, epoch_j=0.0) -> DelayStats:
    k_ij, k_ji = m.k_ij, m.k_ji
    k = k_ij + k_ji
    c_i_ij = np.mean(m.fwd_tx - epoch_i)
    c_i_ji = np.mean(m.rev_rx - epoch_i)
    c_j_ij = np.mean(m.fwd_rx - epoch_j)
    c_j_ji = np.mean(m.rev_tx - epoch_j)
    return DelayStats(
        a_i=(k_ij * c_i_ij - k_ji * c_i_ji) / k,
        a_j=(-k_ij * c_j_ij + k_ji * c_j_ji) / k,
        b_ij=(k_ji - k_ij) / k,
    )


def ml_delay_estimate(stats: DelayStats, vi, vj) -> float:
    """Delay maximizing the exact likelihood for given clock parameters.

    ``vi``/``vj`` are in the same (epoch) coordinates as ``stats``. The sign is
    the one for which substituting back reproduces the quadratic form of
    :func:`approx_neg_log_likelihood`.
    """
    vi = to_local(vi, 0.0)
    vj = to_local(vj, 0.0)
    return -(stats.a_i * vi[0] + stats.a_j * vj[0] + stats.b_ij * vi[1] - stats.b_ij * vj[1])


@dataclass(frozen=True)
class LinkMatrices:
    """Per-link matrices of the delay-free approximate likelihood.

    ``exp(-|A theta_i + B theta_j|^2 / (2 sigma_w^2))`` with thetas in the
    epoch-shifted coordinates of nodes i and j.
    """

    a_mat: np.ndarray
    b_mat: np.ndarray
    sigma_w: float
    node_i: int = 0
    node_j: int = 1
    epoch_i: float = 0.0
    epoch_j: float = 0.0

    @cached_property
    def aa(self) -> np.ndarray:
        """``A^T A / sigma_w^2``"""
        a = self.a_mat / self.sigma_w
        return a.T @ a

    @cached_property
    def ab(self) -> np.ndarray:
        return (self.a_mat / self.sigma_w).T @ (self.b_mat / self.sigma_w)

    @cached_property
    def bb(self) -> np.ndarray:
        b = self.b_mat / self.sigma_w
        return b.T @ b

    @cached_property
    def r_factor(self) -> np.ndarray:
        """R of ``qr([B, A] / sigma_w)``, the basis for stable Schur complements."""
        w = np.hstack([self.b_mat, self.a_mat]) / self.sigma_w
        return np.linalg.qr(w, mode="r")

    @cached_property
    def r_factor_reversed(self) -> np.ndarray:
        w = np.hstack([self.a_mat, self.b_mat]) / self.sigma_w
        return np.linalg.qr(w, mode="r")

    def flipped(self) -> "LinkMatrices":
        """The same link seen from node j: ``A_ji = B_ij``, ``B_ji = A_ij``."""
        return LinkMatrices(self.b_mat, self.a_mat, self.sigma_w, self.node_j, self.node_i, self.epoch_j, self.epoch_i)

    def residual(self, vi, vj) -> np.ndarray:
        return self.a_mat @ np.asarray(vi, dtype=float) + self.b_mat @ np.asarray(vj, dtype=float)


def build_link_matrices(m: LinkMeasurements, sigma_w, epoch_i=0.0, epoch_j=0.0, strict=False,
                        rcond=1e-10) -> LinkMatrices:
    """Assemble ``A_ij`` (node i) and ``B_ij`` (node j) from one link's stamps.

    With one packet per direction the matrices have rank one; that is legal
    (priors regularize the posterior) unless ``strict`` is set.
    """
    st = delay_stats(m, epoch_i, epoch_j)
    k_ij, k_ji = m.k_ij, m.k_ji
    a_mat = np.empty((k_ij + k_ji, 2))
    b_mat = np.empty((k_ij + k_ji, 2))
    a_mat[:k_ij, 0] = -(m.fwd_tx - epoch_i)
    a_mat[:k_ij, 1] = 1.0
    a_mat[k_ij:, 0] = m.rev_rx - epoch_i
    a_mat[k_ij:, 1] = -1.0
    b_mat[:k_ij, 0] = m.fwd_rx - epoch_j
    b_mat[:k_ij, 1] = -1.0
    b_mat[k_ij:, 0] = -(m.rev_tx - epoch_j)
    b_mat[k_ij:, 1] = 1.0
    a_mat += np.array([st.a_i, st.b_ij])
    b_mat += np.array([st.a_j, -st.b_ij])
    for g in (a_mat.T @ a_mat, b_mat.T @ b_mat):
        if not np.all(np.isfinite(g)) or not np.any(g):
            raise DegenerateLink(f"link ({m.node_i}, {m.node_j}) carries no information")
        if strict and is_singular(g, rcond):
            raise DegenerateLink(f"link ({m.node_i}, {m.node_j}) carries no skew information")
    return LinkMatrices(a_mat, b_mat, float(sigma_w), m.node_i, m.node_j, float(epoch_i), float(epoch_j))


def approx_neg_log_likelihood(lm: LinkMatrices, vi, vj) -> float:
    r = lm.residual(vi, vj)
    return float(r @ r) / (2.0 * lm.sigma_w**2)


def exact_neg_log_likelihood(m: LinkMeasurements, theta_i: ClockParams, theta_j: ClockParams, delta, sigma_w,
                             normalized=False) -> float:
    """Negative log of the exact Gaussian likelihood of one link's stamps.

    Without ``normalized`` only the exponent is returned; with it the
    skew-dependent normalization terms are included as well.
    """
    ai, bi, aj, bj = theta_i.alpha, theta_i.beta, theta_j.alpha, theta_j.beta
    # rx - psi with the nearby stamps and phases subtracted first
    rf = (m.fwd_rx - bj) - aj * ((m.fwd_tx - bi) / ai + delta)
    rr = (m.rev_rx - bi) - ai * ((m.rev_tx - bj) / aj + delta)
    val = rf @ rf / (2 * aj**2 * sigma_w**2) + rr @ rr / (2 * ai**2 * sigma_w**2)
    if normalized:
        val += m.k_ij * np.log(aj) + m.k_ji * np.log(ai) + 0.5 * (m.k_ij + m.k_ji) * np.log(2 * np.pi * sigma_w**2)
    return float(val)


def agent_prior(sigma_alpha_sq, sigma_nu_sq, epoch=0.0) -> GaussianNat:
    """Prior ``N([1, 0], diag(sigma_alpha_sq, sigma_nu_sq))`` on ``(lam, nu)``, epoch-shifted."""
    p = np.diag([1.0 / sigma_alpha_sq, 1.0 / sigma_nu_sq])
    g = GaussianNat(p, p @ np.array([1.0, 0.0]))
    return shift_gaussian(g, epoch) if epoch else g


def master_value(epoch=0.0, theta: ClockParams | None = None) -> np.ndarray:
    v = to_transformed(theta) if theta is not None else TransformedParams(1.0, 0.0)
    return to_local(v, epoch)


def prior_for(node, topology: Topology, sigma_alpha_sq, sigma_nu_sq, epoch=0.0) -> GaussianNat:
    """Agent prior, or the huge-precision surrogate for a master's fixed value."""
    if topology.is_master(node):
        p = np.eye(2) * MASTER_SURROGATE_PRECISION
        return GaussianNat(p, p @ master_value(epoch))
    return agent_prior(sigma_alpha_sq, sigma_nu_sq, epoch)


@dataclass
class GlobalPosterior:
    """Joint Gaussian over the stacked node parameters.

    ``sqrt_rows``/``sqrt_rhs`` hold a square-root form ``M`` and ``y`` with
    ``M^T M = precision`` and ``M^T y = info``. The oracle solves through it
    because the precision itself can be too ill-conditioned for Cholesky
    (e.g. master-free networks, where only the priors pin the common offset).
    """

    precision: np.ndarray
    info: np.ndarray
    nodes: tuple
    sqrt_rows: np.ndarray | None = None
    sqrt_rhs: np.ndarray | None = None

    def block(self, i, j) -> np.ndarray:
        a, b = self.nodes.index(i), self.nodes.index(j)
        return self.precision[2 * a:2 * a + 2, 2 * b:2 * b + 2]


def _prior_sqrt(g: GaussianNat):
    try:
        u = scipy.linalg.cholesky(g.precision, lower=False)
    except np.linalg.LinAlgError as exc:
        raise SingularPosterior("prior precision is not positive definite") from exc
    return u, scipy.linalg.solve_triangular(u, g.info, trans="T")


def global_posterior_precision(topology: Topology, link_mats: dict, priors: dict, master_values: dict | None = None,
                               masters="exact") -> GlobalPosterior:
    """Joint precision and information vector of the approximate posterior.

    ``masters="exact"`` conditions on the masters' fixed values, leaving only
    agent blocks. ``masters="surrogate"`` keeps masters as variables with the
    prior supplied in ``priors`` (normally the huge-precision surrogate).
    """
    if masters not in ("exact", "surrogate"):
        raise ValueError(masters)
    master_values = master_values or {}
    if masters == "exact":
        nodes = tuple(topology.agents)
    else:
        nodes = tuple(range(topology.num_nodes))
    pos = {n: k for k, n in enumerate(nodes)}
    dim = 2 * len(nodes)
    lam = np.zeros((dim, dim))
    h = np.zeros(dim)
    rows, rhs = [], []
    for n in nodes:
        sl = slice(2 * pos[n], 2 * pos[n] + 2)
        lam[sl, sl] += priors[n].precision
        h[sl] += priors[n].info
        if np.any(priors[n].precision):
            u, y = _prior_sqrt(priors[n])
            r = np.zeros((2, dim))
            r[:, sl] = u
            rows.append(r)
            rhs.append(y)
    for (i, j), lm in link_mats.items():
        si = slice(2 * pos[i], 2 * pos[i] + 2) if i in pos else None
        sj = slice(2 * pos[j], 2 * pos[j] + 2) if j in pos else None
        r = np.zeros((lm.a_mat.shape[0], dim))
        y = np.zeros(lm.a_mat.shape[0])
        if si is not None:
            lam[si, si] += lm.aa
            r[:, si] = lm.a_mat / lm.sigma_w
        else:
            y -= lm.a_mat @ master_values[i] / lm.sigma_w
        if sj is not None:
            lam[sj, sj] += lm.bb
            r[:, sj] = lm.b_mat / lm.sigma_w
        else:
            y -= lm.b_mat @ master_values[j] / lm.sigma_w
        if si is not None and sj is not None:
            lam[si, sj] += lm.ab
            lam[sj, si] += lm.ab.T
        elif si is not None:
            h[si] -= lm.ab @ master_values[j]
        elif sj is not None:
            h[sj] -= lm.ab.T @ master_values[i]
        rows.append(r)
        rhs.append(y)
    m = np.vstack(rows) if rows else np.zeros((0, dim))
    return GlobalPosterior(0.5 * (lam + lam.T), h, nodes, m, np.concatenate(rhs) if rhs else np.zeros(0))


def exact_moments(post: GlobalPosterior):
    """Joint posterior mean and covariance by a dense factorization.

    Uses QR of the square-root form when available, Cholesky otherwise.
    """
    dim = post.precision.shape[0]
    if post.sqrt_rows is not None and post.sqrt_rows.shape[0] >= dim:
        m = post.sqrt_rows
        scale = np.linalg.norm(m, axis=0)
        if np.any(scale == 0):
            raise SingularPosterior("a variable carries no information")
        q, r = np.linalg.qr(m / scale)
        d = np.abs(np.diag(r))
        if d.min() <= 1e-13 * d.max():
            raise SingularPosterior("posterior precision is singular")
        z = scipy.linalg.solve_triangular(r, q.T @ post.sqrt_rhs)
        rinv = scipy.linalg.solve_triangular(r, np.eye(dim))
        mean = z / scale
        cov = (rinv @ rinv.T) / np.outer(scale, scale)
        return mean, 0.5 * (cov + cov.T)
    lam = post.precision
    d = np.sqrt(np.diag(lam))
    if np.any(d <= 0) or not np.all(np.isfinite(d)):
        raise SingularPosterior("posterior precision has non-positive diagonal")
    try:
        cf = scipy.linalg.cho_factor(lam / np.outer(d, d), lower=True)
    except np.linalg.LinAlgError as exc:
        raise SingularPosterior(str(exc)) from exc
    mean = scipy.linalg.cho_solve(cf, post.info / d) / d
    cov = scipy.linalg.cho_solve(cf, np.eye(len(d))) / np.outer(d, d)
    return mean, 0.5 * (cov + cov.T)


@dataclass(frozen=True)
class Marginal:
    mean: np.ndarray
    cov: np.ndarray

    def as_gaussian(self) -> GaussianNat:
        return GaussianNat.from_moments(self.mean, self.cov)


def exact_marginals(post: GlobalPosterior) -> dict:
    """Per-node marginal mean and covariance blocks of the joint posterior."""
    mean, cov = exact_moments(post)
    out = {}
    for k, n in enumerate(post.nodes):
        sl = slice(2 * k, 2 * k + 2)
        out[n] = Marginal(mean[sl].copy(), cov[sl, sl].copy())
    return out


def posterior_mean(post: GlobalPosterior) -> dict:
    return {n: g.mean for n, g in exact_marginals(post).items()}


@dataclass
class SyncProblem:
    """Everything the synchronizers and the oracle need for one network draw."""

    topology: Topology
    link_mats: dict
    priors: dict
    epochs: np.ndarray
    master_values: dict

    def posterior(self, masters="exact") -> GlobalPosterior:
        priors = dict(self.priors)
        if masters == "surrogate":
            for m in self.topology.masters:
                p = np.eye(2) * MASTER_SURROGATE_PRECISION
                priors[m] = GaussianNat(p, p @ self.master_values[m])
        return global_posterior_precision(self.topology, self.link_mats, priors, self.master_values, masters)


def build_problem(topology: Topology, measurements: dict, sigma_w, sigma_alpha_sq, sigma_nu_sq,
                  epochs=None, master_clocks: dict | None = None) -> SyncProblem:
    """Epochs, link matrices, agent priors and master values for a measured network."""
    from .clock import node_epochs

    if epochs is None:
        epochs = node_epochs(topology, measurements)
    epochs = np.asarray(epochs, dtype=float)
    missing = set(topology.edges) - set(measurements)
    if missing:
        raise ValueError(f"no measurements for edges {sorted(missing)}")
    link_mats = {
        (i, j): build_link_matrices(measurements[(i, j)], sigma_w, epochs[i], epochs[j]) for (i, j) in topology.edges
    }
    priors = {i: agent_prior(sigma_alpha_sq, sigma_nu_sq, epochs[i]) for i in topology.agents}
    master_clocks = master_clocks or {}
    mvals = {m: master_value(epochs[m], master_clocks.get(m)) for m in topology.masters}
    return SyncProblem(topology, link_mats, priors, epochs, mvals)
