"""Run configuration: defaults, key=value files, and tolerance overrides."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields

from . import lp as _lp
from . import mip as _mip

SEED_ENV = "LEARNBRANCH_SEED"


@dataclass
class RunConfig:
    seed: int = 0
    strategy: str = "sb"
    budget: str = ""  # "<n>nodes" or "<n>s"; empty means run to exhaustion
    ladder: tuple = (1000, 2000, 4000, 8000)
    ladder_unit: str = "nodes"
    eta: int = _mip.DEFAULT_ETA
    mix_prob: float = 0.5
    n_samples: int = 5000
    collect_node_limit: int = 0  # 0: each collection run goes to exhaustion
    arch: str = "gcnn"
    d: int = 0  # 0: the architecture's default width
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    validation_fraction: float = 0.1
    train_time_limit: float = 0.0  # 0: no limit
    k: int = 0  # CVRP fleet size; 0 means k_min
    symmetry_breaking: bool = True
    workers: int = field(default_factory=lambda: os.cpu_count() or 1)
    feas_tol: float = _lp.FEAS_TOL
    opt_tol: float = _lp.OPT_TOL
    pivot_tol: float = _lp.PIVOT_TOL
    int_tol: float = _mip.INT_TOL
    sb_eps: float = _mip.SB_EPS

    def as_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["ladder"] = list(self.ladder)
        return out


def _coerce(f: dataclasses.Field, raw: str):
    default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{f.name}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(float(x) if "." in x else int(x) for x in raw.replace(" ", "").split(",") if x)
    return raw.strip()


def apply_overrides(cfg: RunConfig, pairs: dict[str, str]) -> RunConfig:
    known = {f.name: f for f in fields(RunConfig)}
    unknown = sorted(set(pairs) - set(known))
    if unknown:
        raise ValueError(f"unknown config key(s): {', '.join(unknown)}")
    updates = {k: _coerce(known[k], v) for k, v in pairs.items()}
    return dataclasses.replace(cfg, **updates)


def parse_config_text(text: str) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value")
        key, _, val = line.partition("=")
        out[key.strip()] = val.strip()
    return out


def load_config_file(path: str, cfg: RunConfig | None = None) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return apply_overrides(cfg or RunConfig(), parse_config_text(fh.read()))


def seed_from_env(cfg: RunConfig) -> RunConfig:
    raw = os.environ.get(SEED_ENV)
    return dataclasses.replace(cfg, seed=int(raw)) if raw not in (None, "") else cfg


def apply_tolerances(cfg: RunConfig) -> None:
    """Install the configured tolerances process-wide (the solvers read them at call time)."""
    _lp.FEAS_TOL, _lp.OPT_TOL, _lp.PIVOT_TOL = cfg.feas_tol, cfg.opt_tol, cfg.pivot_tol
    _mip.INT_TOL, _mip.SB_EPS = cfg.int_tol, cfg.sb_eps
