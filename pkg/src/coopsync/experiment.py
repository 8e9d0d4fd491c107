"""Monte Carlo experiment orchestration and CSV output.

Seeding: run ``r`` draws from ``SeedSequence(seed, spawn_key=(r, s))`` where
``s`` names the purpose (topology, clocks and measurements, one stream per
baseline). Every sweep value reuses the same streams, so sweep points see
common random numbers, and adding an algorithm never perturbs another.
"""
from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .baselines import run_admm, run_ats, run_lc
from .bcrb import bcrb, schedules_for
from .clock import LinkDelayModel, propagation_delay, sample_clocks, simulate_network
from .config import ExperimentConfig
from .errors import NotConverged, SyncError
from .messaging import BP, MF, run_sync
from .metrics import VS_MEAN, VS_TRUTH, clock_errors, rmse_arrays
from .statmodel import build_problem
from .topology import gen_grid_topology, gen_random_topology, topology_from_edges

# spawn-key slots of the per-run random streams
STREAM_TOPOLOGY = 0
STREAM_MEASUREMENT = 1
STREAM_BASELINE = {"ats": 2, "admm": 3, "lc": 4}

RESULT_COLUMNS = ("sweep_value", "run", "algorithm", "status", "iterations", "broadcasts", "rmse_phase_s",
                  "rmse_skew_ppm", "message")
NODE_COLUMNS = ("sweep_value", "run", "algorithm", "node", "hop", "phase_error_s", "skew_error_ppm")
CONVERGENCE_COLUMNS = ("sweep_value", "run", "algorithm", "iteration", "broadcasts", "rmse_phase_s",
                       "rmse_skew_ppm")
BCRB_COLUMNS = ("sweep_value", "run", "node", "hop", "status", "bcrb_skew_ppm", "bcrb_phase_s")
TRACE_COLUMNS = ("algorithm", "iteration", "node", "mean_lambda", "mean_nu", "var_lambda", "var_nu", "mean_change")


def run_rng(seed, run, stream) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(run, stream)))


@dataclass
class MetricRow:
    """Final accuracy of one algorithm on one Monte Carlo run."""

    sweep_value: float
    run: int
    algorithm: str
    status: str
    iterations: int
    broadcasts: float  # mean per node
    rmse_phase_s: float
    rmse_skew_ppm: float
    phase_errors: dict = field(default_factory=dict)
    skew_errors_ppm: dict = field(default_factory=dict)
    message: str = ""


@dataclass
class RunOutput:
    sweep_index: int
    sweep_value: float
    run: int
    metrics: list = field(default_factory=list)
    convergence: list = field(default_factory=list)  # tuples in CONVERGENCE_COLUMNS order
    bcrb: list = field(default_factory=list)  # tuples in BCRB_COLUMNS order
    trace: list = field(default_factory=list)  # tuples in TRACE_COLUMNS order
    hops: dict = field(default_factory=dict)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    runs: list

    @property
    def metrics(self) -> list:
        return [m for r in self.runs for m in r.metrics]


def make_topology(cfg: ExperimentConfig, rng):
    if cfg.topology == "grid":
        return gen_grid_topology(cfg.rows, cfg.cols, cfg.grid_spacing, master_corner=bool(cfg.masters))
    if cfg.topology == "edges":
        n = max((max(e) for e in cfg.edges), default=-1) + 1
        return topology_from_edges(n, sorted(tuple(sorted(e)) for e in cfg.edges), cfg.masters)
    return gen_random_topology(cfg.n, cfg.area, cfg.radius, cfg.masters, rng)


def topology_for_run(cfg: ExperimentConfig, seed, run):
    """The network of Monte Carlo run ``run`` (run 0's network when fixed)."""
    return make_topology(cfg, run_rng(seed, 0 if cfg.fixed_topology else run, STREAM_TOPOLOGY))


@dataclass
class NetworkDraw:
    topology: object
    clocks: list
    measurements: dict
    delay_model: LinkDelayModel


def draw_network(cfg: ExperimentConfig, seed, run) -> NetworkDraw:
    """Topology, clocks and two-way measurements of one Monte Carlo run."""
    topo = topology_for_run(cfg, seed, run)
    rng = run_rng(seed, run, STREAM_MEASUREMENT)
    clocks = sample_clocks(topo, cfg.sigma_alpha_sq, (cfg.phase_min, cfg.phase_max), rng)
    delay_model = LinkDelayModel(cfg.t_c, sigma_w=cfg.sigma_w)
    measurements = simulate_network(topo, clocks, delay_model, cfg.k_ij, cfg.k_ji, cfg.spacing, rng)
    return NetworkDraw(topo, clocks, measurements, delay_model)


def hop_levels(topology, initiator=0) -> np.ndarray:
    sources = topology.masters if topology.masters else frozenset({initiator})
    return topology.hop_distances(sources)


def measurement_packets(topology, k_ij, k_ji) -> np.ndarray:
    """Timestamp packets each node transmits during the two-way exchanges."""
    out = np.zeros(topology.num_nodes, dtype=int)
    for i, j in topology.edges:
        out[i] += k_ij
        out[j] += k_ji
    return out


def _failed(sweep_value, run, algorithm, exc) -> MetricRow:
    return MetricRow(sweep_value, run, algorithm, type(exc).__name__, 0, math.nan, math.nan, math.nan,
                     message=str(exc))


def _run_message_passing(cfg, out: RunOutput, problem, clocks, packets, algorithm, trace):
    topo = problem.topology
    schedule = cfg.bp_schedule if algorithm == BP else cfg.mf_schedule
    damping = cfg.bp_damping if algorithm == BP else cfg.mf_damping
    status = "ok"
    try:
        res = run_sync(topo, problem.link_mats, problem.priors, problem.epochs, algorithm, schedule, cfg.max_iter,
                       cfg.tol, damping, cfg.initiator, problem.master_values, packets, trace)
    except NotConverged as exc:
        res, status = exc.result, "not_converged"
    agents = list(res.agents)
    mode = VS_TRUTH if topo.masters else VS_MEAN
    alpha = np.array([clocks[a].alpha for a in agents])
    beta = np.array([clocks[a].beta for a in agents])
    n = topo.num_nodes
    for it, (means, bc) in enumerate(zip(res.mean_history, res.broadcast_history), 1):
        with np.errstate(divide="ignore", invalid="ignore"):
            a_hat = 1.0 / means[:, 0]
            b_hat = means[:, 1] / means[:, 0]
        rp, rs, _, _ = rmse_arrays(a_hat, b_hat, alpha, beta, mode)
        out.convergence.append((out.sweep_value, out.run, algorithm, it, bc / n, rp, rs))
    est = res.estimates
    rp, rs, eb, ea = rmse_arrays([est[a].alpha for a in agents], [est[a].beta for a in agents], alpha, beta, mode)
    out.metrics.append(MetricRow(out.sweep_value, out.run, algorithm, status, res.iterations_run,
                                 float(np.mean(res.broadcasts)), rp, rs, dict(zip(agents, eb.tolist())),
                                 dict(zip(agents, ea.tolist()))))
    for row in res.trace_rows:
        out.trace.append((algorithm, row.iteration, row.node, row.mean_lambda, row.mean_nu, row.var_lambda,
                          row.var_nu, row.mean_change))


def _baseline_trace_rows(algorithm, trace, clocks, nodes):
    alpha = np.array([c.alpha for c in clocks])
    beta = np.array([c.beta for c in clocks])
    rows, prev = [], None
    for it, (g, h) in enumerate(zip(trace.skews, trace.offsets)):
        a_hat = alpha / g
        lam = 1.0 / a_hat
        nu = (beta - h * a_hat) / a_hat
        cur = np.stack([lam, nu], axis=1)
        change = np.zeros(len(cur)) if prev is None else np.max(np.abs(cur - prev), axis=1)
        prev = cur
        for k in nodes:
            rows.append((algorithm, it, k, lam[k], nu[k], math.nan, math.nan, change[k]))
    return rows


def _run_baseline(cfg, seed, out: RunOutput, topo, clocks, measurements, delays, packets, algorithm, trace):
    rng = run_rng(seed, out.run, STREAM_BASELINE[algorithm])
    if algorithm == "ats":
        tr = run_ats(topo, clocks, delays, cfg.sigma_w, rng, cfg.baseline_iterations, cfg.baseline_period,
                     rho_eta=cfg.ats_rho_eta, rho_alpha=cfg.ats_rho_alpha, rho_o=cfg.ats_rho_o)
    elif algorithm == "admm":
        tr = run_admm(topo, clocks, delays, cfg.sigma_w, rng, cfg.baseline_iterations, cfg.baseline_period,
                      eps=cfg.admm_eps or None, inner=cfg.admm_inner, pll_std=cfg.pll_std)
    else:
        tr = run_lc(topo, clocks, measurements, cfg.baseline_iterations, cfg.lc_lambda, packets,
                    cfg.baseline_period)
    # consensus protocols define their own timescale; LC is anchored at the masters
    if algorithm == "lc":
        nodes, mode = list(topo.agents), VS_TRUTH
    else:
        nodes, mode = list(range(topo.num_nodes)), VS_MEAN
    for it, (bc, g, h, t) in enumerate(zip(tr.broadcasts, tr.skews, tr.offsets, tr.times)):
        et, es = clock_errors(g, h, t, nodes, mode)
        out.convergence.append((out.sweep_value, out.run, algorithm, it, bc, et, es))
    g, h, t = tr.skews[-1], tr.offsets[-1], tr.times[-1]
    e_time = g[nodes] * t + h[nodes] - t
    e_skew = (g[nodes] - 1.0) * 1e6
    if mode == VS_MEAN:
        e_time = e_time - e_time.mean()
        e_skew = e_skew - e_skew.mean()
    et, es = clock_errors(g, h, t, nodes, mode)
    out.metrics.append(MetricRow(out.sweep_value, out.run, algorithm, "ok", len(tr.times) - 1, tr.broadcasts[-1],
                                 et, es, dict(zip(nodes, e_time.tolist())), dict(zip(nodes, e_skew.tolist()))))
    if trace:
        out.trace.extend(_baseline_trace_rows(algorithm, tr, clocks, nodes))


def simulate_run(cfg: ExperimentConfig, seed, run, sweep_index=0, sweep_value=math.nan, algorithms=None,
                 with_bcrb=None, trace=None) -> RunOutput:
    """One Monte Carlo run of every requested algorithm on a fresh network draw."""
    algorithms = cfg.algorithms if algorithms is None else tuple(algorithms)
    with_bcrb = cfg.bcrb if with_bcrb is None else with_bcrb
    trace = cfg.trace if trace is None else trace
    out = RunOutput(sweep_index, sweep_value, run)
    try:
        net = draw_network(cfg, seed, run)
    except SyncError as exc:
        out.metrics = [_failed(sweep_value, run, a, exc) for a in algorithms]
        return out
    topo, clocks, measurements, delay_model = net.topology, net.clocks, net.measurements, net.delay_model
    hops = hop_levels(topo, cfg.initiator)
    out.hops = {k: int(hops[k]) for k in range(topo.num_nodes)}
    packets = measurement_packets(topo, cfg.k_ij, cfg.k_ji)
    delays = {e: propagation_delay(topo, delay_model, e) for e in topo.edges}
    problem = None
    for algorithm in algorithms:
        try:
            if algorithm in (BP, MF):
                if problem is None:
                    problem = build_problem(topo, measurements, cfg.sigma_w, cfg.sigma_alpha_sq, cfg.sigma_nu_sq)
                _run_message_passing(cfg, out, problem, clocks, packets, algorithm, trace)
            else:
                _run_baseline(cfg, seed, out, topo, clocks, measurements, delays, packets, algorithm, trace)
        except (SyncError, ValueError, np.linalg.LinAlgError) as exc:
            out.metrics.append(_failed(sweep_value, run, algorithm, exc))
    if with_bcrb:
        scheds = schedules_for(topo, delay_model, cfg.k_ij, cfg.k_ji, cfg.spacing)
        sigma_beta_sq = (cfg.phase_max - cfg.phase_min) ** 2 / 12.0
        try:
            bounds = bcrb(topo, scheds, cfg.sigma_w, cfg.sigma_alpha_sq, sigma_beta_sq)
            for node, b in sorted(bounds.items()):
                out.bcrb.append((sweep_value, run, node, out.hops[node], "ok", b.skew_ppm, b.phase))
        except (SyncError, ValueError, np.linalg.LinAlgError) as exc:
            out.bcrb.append((sweep_value, run, -1, -1, type(exc).__name__, math.nan, math.nan))
    return out


def _task(args):
    return simulate_run(*args)


def run_experiment(cfg: ExperimentConfig, seed=None, algorithms=None, with_bcrb=None, trace=None,
                   workers=None) -> ExperimentResult:
    """All Monte Carlo runs at every sweep value, ordered by (sweep value, run)."""
    seed = cfg.seed if seed is None else seed
    points = [(k, cfg.at(v), float(v)) for k, v in enumerate(cfg.sweep_values)] if cfg.sweep_key else \
        [(0, cfg, math.nan)]
    tasks = [(c, seed, run, k, v, algorithms, with_bcrb, trace) for k, c, v in points for run in range(cfg.runs)]
    workers = cfg.workers if workers is None else workers
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(_task, tasks))
    else:
        runs = [_task(t) for t in tasks]
    runs.sort(key=lambda r: (r.sweep_index, r.run))
    return ExperimentResult(cfg, runs)


def fmt(value) -> str:
    """Deterministic CSV text for a cell."""
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        v = float(value)
        return "nan" if math.isnan(v) else format(v, ".12g")
    return str(value)


def _write(path: Path, header, rows):
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def write_results(result: ExperimentResult, out_dir) -> list:
    """Write the result tables (plus one trace file per run when traced); returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    name = result.config.name
    paths = []

    def emit(suffix, header, rows):
        p = out / f"{name}_{suffix}.csv"
        _write(p, header, rows)
        paths.append(p)

    emit("results", RESULT_COLUMNS, (
        (m.sweep_value, m.run, m.algorithm, m.status, m.iterations, m.broadcasts, m.rmse_phase_s, m.rmse_skew_ppm,
         m.message) for m in result.metrics))
    emit("nodes", NODE_COLUMNS, (
        (m.sweep_value, m.run, m.algorithm, node, r.hops.get(node, -1), m.phase_errors[node],
         m.skew_errors_ppm[node])
        for r in result.runs for m in r.metrics for node in sorted(m.phase_errors)))
    emit("convergence", CONVERGENCE_COLUMNS, (row for r in result.runs for row in r.convergence))
    if any(r.bcrb for r in result.runs):
        emit("bcrb", BCRB_COLUMNS, (row for r in result.runs for row in r.bcrb))
    for r in result.runs:
        if r.trace:
            p = out / f"{name}_trace_{r.sweep_index}_{r.run}.csv"
            _write(p, TRACE_COLUMNS, r.trace)
            paths.append(p)
    return paths
