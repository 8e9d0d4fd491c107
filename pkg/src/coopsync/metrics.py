"""Error metrics for clock estimates."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import spearmanr

VS_TRUTH = "vs-truth"
VS_MEAN = "vs-network-mean"


@dataclass(frozen=True)
class RmseResult:
    rmse_phase: float
    rmse_skew_ppm: float
    phase_errors: dict
    skew_errors_ppm: dict


def rmse_metrics(estimates: dict, truth, mode=VS_TRUTH, nodes=None) -> RmseResult:
    """RMS over nodes of ``beta_hat - beta`` (s) and ``(alpha_hat - alpha) * 1e6`` (ppm).

    ``truth`` is indexable by node id. In ``vs-network-mean`` mode the
    common error of all nodes is removed first.
    """
    if mode not in (VS_TRUTH, VS_MEAN):
        raise ValueError(f"unknown mode {mode!r}")
    nodes = sorted(estimates) if nodes is None else list(nodes)
    if not nodes:
        return RmseResult(0.0, 0.0, {}, {})
    rp, rs, eb, ea = rmse_arrays(
        [estimates[k].alpha for k in nodes], [estimates[k].beta for k in nodes],
        [truth[k].alpha for k in nodes], [truth[k].beta for k in nodes], mode,
    )
    return RmseResult(rp, rs, dict(zip(nodes, eb.tolist())), dict(zip(nodes, ea.tolist())))


def rmse_arrays(alpha_hat, beta_hat, alpha, beta, mode=VS_TRUTH):
    """Array form of :func:`rmse_metrics`: ``(rmse_phase, rmse_skew_ppm, phase_err, skew_err_ppm)``."""
    if mode not in (VS_TRUTH, VS_MEAN):
        raise ValueError(f"unknown mode {mode!r}")
    eb = np.asarray(beta_hat, dtype=float) - np.asarray(beta, dtype=float)
    ea = (np.asarray(alpha_hat, dtype=float) - np.asarray(alpha, dtype=float)) * 1e6
    if eb.size == 0:
        return 0.0, 0.0, eb, ea
    if mode == VS_MEAN:
        eb = eb - eb.mean()
        ea = ea - ea.mean()
    return float(np.sqrt(np.mean(eb**2))), float(np.sqrt(np.mean(ea**2))), eb, ea


def clock_errors(g, h, t, nodes, mode=VS_TRUTH):
    """RMS skew error (ppm) and time error at ``t`` (s) of corrected clocks ``g * t + h``."""
    nodes = list(nodes)
    g = np.asarray(g, dtype=float)[nodes]
    h = np.asarray(h, dtype=float)[nodes]
    es = (g - 1.0) * 1e6
    et = g * t + h - t
    if mode == VS_MEAN:
        es = es - es.mean()
        et = et - et.mean()
    return float(np.sqrt(np.mean(et**2))), float(np.sqrt(np.mean(es**2)))


def corrected_from_estimates(clocks, estimates: dict, num_nodes):
    """Corrected-clock coefficients ``(c - beta_hat) / alpha_hat`` in reference time."""
    g = np.ones(num_nodes)
    h = np.zeros(num_nodes)
    for k, est in estimates.items():
        g[k] = clocks[k].alpha / est.alpha
        h[k] = (clocks[k].beta - est.beta) / est.alpha
    return g, h


def broadcasts_to_floor(broadcasts, values, factor=1.5, tail=0.25) -> float:
    """Broadcast count after which ``values`` stays within ``factor`` of its floor.

    The floor is the median of the last ``tail`` fraction of the trace.
    """
    b = np.asarray(broadcasts, dtype=float)
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return float("nan")
    floor = float(np.median(v[int(np.floor(v.size * (1 - tail))):]))
    above = np.flatnonzero(v > factor * floor)
    if above.size == 0:
        return float(b[0])
    last = above[-1] + 1
    return float(b[min(last, b.size - 1)])


def spearman(x, y) -> float:
    return float(spearmanr(x, y).statistic)


def loglog_slope(x, y) -> float:
    """Least-squares slope of ``log10 y`` against ``log10 x``."""
    return float(np.polyfit(np.log10(np.asarray(x, dtype=float)), np.log10(np.asarray(y, dtype=float)), 1)[0])
