"""Flat ``key = value`` experiment configuration.

One key per line; ``#`` starts a comment; blank lines are ignored. Unknown
keys, duplicate keys and malformed values are errors.
"""
from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .errors import ConfigError

ALGORITHMS = ("bp", "mf", "ats", "admm", "lc")


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text: str) -> tuple:
    t = text.strip()
    if t.lower() in ("", "none"):
        return ()
    return tuple(int(v) for v in t.split(","))


def _float_list(text: str) -> tuple:
    t = text.strip()
    if not t:
        return ()
    return tuple(float(v) for v in t.split(","))


def _edge_list(text: str) -> tuple:
    """``0-1;1-2;2-0`` -> ((0, 1), (1, 2), (2, 0))"""
    t = text.strip()
    if not t:
        return ()
    out = []
    for item in t.split(";"):
        a, b = item.split("-")
        out.append((int(a), int(b)))
    return tuple(out)


def _algos(text: str) -> tuple:
    names = tuple(v.strip().lower() for v in text.split(",") if v.strip())
    if names == ("all",):
        return ALGORITHMS
    for name in names:
        if name not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {name!r}")
    if not names:
        raise ValueError("no algorithm given")
    return names


def _choice(*options):
    def parse(text: str) -> str:
        t = text.strip().lower()
        if t not in options:
            raise ValueError(f"expected one of {options}, got {text!r}")
        return t

    return parse


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    # topology
    topology: str = "random"
    n: int = 26
    area: float = 1000.0
    radius: float = 300.0
    rows: int = 4
    cols: int = 4
    grid_spacing: float = 100.0
    edges: tuple = ()
    masters: tuple = (0,)
    fixed_topology: bool = False
    # measurements
    k_ij: int = 20
    k_ji: int = 20
    sigma_w: float = 93e-9
    t_c: float = 7.6e-6
    spacing: float = 0.01
    # priors and clock draws
    sigma_alpha_sq: float = 1e-8
    phase_min: float = -10.0
    phase_max: float = 10.0
    sigma_nu_sq: float = 33.64
    # message passing
    algorithms: tuple = ("bp",)
    bp_schedule: str = "serial"
    mf_schedule: str = "serial"
    tol: float = 1e-9
    max_iter: int = 200
    bp_damping: float = 1.0
    mf_damping: float = 1.0
    initiator: int = 0
    # baselines
    baseline_iterations: int = 1000
    baseline_period: float = 0.1
    ats_rho_eta: float = 0.6
    ats_rho_alpha: float = 0.6
    ats_rho_o: float = 0.6
    admm_eps: float = 0.0  # 0 selects the Laplacian-based step size
    admm_inner: int = 1
    pll_std: float = 0.5e-6
    lc_lambda: float = 0.9
    # Monte Carlo
    runs: int = 10
    seed: int = 0
    sweep_key: str = ""
    sweep_values: tuple = ()
    bcrb: bool = False
    trace: bool = False
    workers: int = 1

    def __post_init__(self):
        positive = ("area", "radius", "grid_spacing", "spacing", "sigma_alpha_sq", "sigma_nu_sq", "tol",
                    "baseline_period")
        for key in positive:
            if not getattr(self, key) > 0:
                raise ConfigError(f"{key} must be positive")
        for key in ("sigma_w", "t_c", "pll_std", "admm_eps"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be non-negative")
        for key in ("k_ij", "k_ji", "max_iter", "runs", "workers", "admm_inner"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be at least 1")
        if self.phase_max < self.phase_min:
            raise ConfigError("phase_max must not be below phase_min")
        for key in ("bp_damping", "mf_damping"):
            if not 0 < getattr(self, key) <= 1:
                raise ConfigError(f"{key} must lie in (0, 1]")
        if self.sweep_key and self.sweep_key not in _SWEEPABLE:
            raise ConfigError(f"cannot sweep {self.sweep_key!r}")
        if self.sweep_key and not self.sweep_values:
            raise ConfigError("sweep_key needs sweep_values")

    def at(self, value) -> "ExperimentConfig":
        """Copy with the sweep key set to ``value``."""
        if not self.sweep_key:
            return self
        kind = _SWEEPABLE[self.sweep_key]
        v = int(value) if kind is int else float(value)
        if self.sweep_key == "k":
            return replace(self, k_ij=int(v), k_ji=int(v))
        if self.sweep_key == "grid":
            return replace(self, rows=int(v), cols=int(v))
        return replace(self, **{self.sweep_key: v})


_PARSERS = {
    "name": str,
    "topology": _choice("random", "grid", "edges"),
    "n": int,
    "area": float,
    "radius": float,
    "rows": int,
    "cols": int,
    "grid_spacing": float,
    "edges": _edge_list,
    "masters": _int_list,
    "fixed_topology": _bool,
    "k_ij": int,
    "k_ji": int,
    "sigma_w": float,
    "t_c": float,
    "spacing": float,
    "sigma_alpha_sq": float,
    "phase_min": float,
    "phase_max": float,
    "sigma_nu_sq": float,
    "algorithms": _algos,
    "bp_schedule": _choice("parallel", "serial"),
    "mf_schedule": _choice("parallel", "serial"),
    "tol": float,
    "max_iter": int,
    "bp_damping": float,
    "mf_damping": float,
    "initiator": int,
    "baseline_iterations": int,
    "baseline_period": float,
    "ats_rho_eta": float,
    "ats_rho_alpha": float,
    "ats_rho_o": float,
    "admm_eps": float,
    "admm_inner": int,
    "pll_std": float,
    "lc_lambda": float,
    "runs": int,
    "seed": int,
    "sweep_key": str,
    "sweep_values": _float_list,
    "bcrb": _bool,
    "trace": _bool,
    "workers": int,
}
# "k" sets both directions at once, "damping" both algorithms
_ALIASES = {"k": ("k_ij", "k_ji"), "damping": ("bp_damping", "mf_damping"), "algorithm": ("algorithms",)}
# "k" sets both packet counts and "grid" both grid dimensions
_SWEEPABLE = {"sigma_w": float, "k": int, "grid": int, "t_c": float, "sigma_nu_sq": float, "radius": float, "rows": int,
              "cols": int, "n": int}


def parse_config(text: str, source="<config>") -> ExperimentConfig:
    values = {}
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.lower()
        if key in seen:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        seen.add(key)
        if key not in _PARSERS and key not in _ALIASES:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        targets = _ALIASES.get(key, (key,))
        parser = _PARSERS[targets[0]]
        try:
            parsed = parser(value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from exc
        for t in targets:
            if t in values:
                raise ConfigError(f"{source}:{lineno}: {key!r} conflicts with an earlier key")
            values[t] = parsed
    try:
        return ExperimentConfig(**values)
    except TypeError as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {p}: {exc}") from exc
    return parse_config(text, str(p))


def format_config(cfg: ExperimentConfig) -> str:
    """Inverse of :func:`parse_config` (round-trips every field)."""
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if f.name == "edges":
            s = ";".join(f"{a}-{b}" for a, b in v)
        elif isinstance(v, tuple):
            s = ",".join(str(x) for x in v) if v else ("none" if f.name == "masters" else "")
        elif isinstance(v, bool):
            s = "true" if v else "false"
        else:
            s = repr(v) if isinstance(v, float) else str(v)
        lines.append(f"{f.name} = {s}")
    return "\n".join(lines) + "\n"
