"""Run configuration: JSON ingestion with field-level validation.

Unknown keys are rejected.  Unit conversions happen here and nowhere
else: with ``gamma_convention = "cycles"`` the ``gamma`` value is a
cycle frequency in kHz/mG and is multiplied by 2*pi*1e6 on ingestion;
with ``"angular"`` it is already rad s^-1 G^-1.
"""

from __future__ import annotations

import importlib.resources
import json
import math
from dataclasses import dataclass, field, replace

from .core import INFINITE, PhysicalParams, TimeGrid, gamma_from_cycles, make_grid, validate_params

GAMMA_CONVENTIONS = ("angular", "cycles")

_PARAM_KEYS = {
    "j_total", "gamma", "gamma_convention", "b_true", "meas_strength",
    "efficiency", "prior_b_variance", "t_total",
}
_GRID_KEYS = {"dt", "log_prefix", "prefix_ratio", "prefix_safety"}
_ENSEMBLE_KEYS = {"n_traj", "estimators", "checkpoints_per_decade", "first_checkpoint",
                  "checkpoint_times", "mse_ratio_window"}
_SCALING_KEYS = {"j_values", "t_check", "n_traj", "slope_window", "shotnoise_slope_tol"}
_ORACLE_KEYS = {"j_small", "mt_max", "dephasing_j", "mean_threshold_frac", "dephasing_tol"}
_TOP_KEYS = _PARAM_KEYS | {"grid", "ensemble", "scaling", "oracle", "seed", "lowpass_cutoff_hz"}


class ConfigError(ValueError):
    """Configuration document rejected; message carries the field path."""


@dataclass(frozen=True)
class GridConfig:
    dt: float | None = None
    log_prefix: str | bool = "auto"
    prefix_ratio: float = 1.2
    prefix_safety: float = 0.2


@dataclass(frozen=True)
class EnsembleConfig:
    n_traj: int = 10_000
    estimators: tuple = ("qkf", "regression")
    checkpoints_per_decade: int = 30
    first_checkpoint: float | None = None
    checkpoint_times: tuple = ()
    mse_ratio_window: tuple = (0.9, 1.1)


@dataclass(frozen=True)
class ScalingConfig:
    j_values: tuple = (1e4, 1e5, 1e6, 4e6)
    t_check: float | None = None
    n_traj: int = 2000
    slope_window: tuple = (-1.05, -0.95)
    shotnoise_slope_tol: float = 1e-9


@dataclass(frozen=True)
class OracleConfig:
    j_small: float = 10.0
    mt_max: float = 0.1
    dephasing_j: float = 5.0
    mean_threshold_frac: float = 0.05
    dephasing_tol: float = 0.01


@dataclass(frozen=True)
class RunConfig:
    params: PhysicalParams
    gamma_convention: str = "angular"
    gamma_raw: float = 0.0  # the document's gamma value, pre-conversion
    grid: GridConfig = field(default_factory=GridConfig)
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    scaling: ScalingConfig = field(default_factory=ScalingConfig)
    oracle: OracleConfig = field(default_factory=OracleConfig)
    seed: int = 0
    lowpass_cutoff_hz: float | None = None

    def make_grid(self) -> TimeGrid:
        return make_grid(self.params, dt=self.grid.dt, prefix=self.grid.log_prefix,
                         prefix_ratio=self.grid.prefix_ratio,
                         prefix_safety=self.grid.prefix_safety)

    def resolved_dict(self) -> dict:
        """Full resolved configuration for run artifacts (audit echo)."""
        p = self.params
        return {
            "params": {
                "j_total": p.j_total, "gamma": p.gamma, "b_true": p.b_true,
                "meas_strength": p.meas_strength, "efficiency": p.efficiency,
                "prior_b_variance": ("infinite" if math.isinf(p.prior_b_variance)
                                     else p.prior_b_variance),
                "t_total": p.t_total,
            },
            "gamma_convention": self.gamma_convention,
            "grid": {"dt": self.grid.dt, "log_prefix": self.grid.log_prefix,
                     "prefix_ratio": self.grid.prefix_ratio,
                     "prefix_safety": self.grid.prefix_safety},
            "ensemble": {"n_traj": self.ensemble.n_traj,
                         "estimators": list(self.ensemble.estimators),
                         "checkpoints_per_decade": self.ensemble.checkpoints_per_decade,
                         "first_checkpoint": self.ensemble.first_checkpoint,
                         "checkpoint_times": list(self.ensemble.checkpoint_times),
                         "mse_ratio_window": list(self.ensemble.mse_ratio_window)},
            "scaling": {"j_values": list(self.scaling.j_values),
                        "t_check": self.scaling.t_check, "n_traj": self.scaling.n_traj,
                        "slope_window": list(self.scaling.slope_window)},
            "oracle": {"j_small": self.oracle.j_small, "mt_max": self.oracle.mt_max,
                       "dephasing_j": self.oracle.dephasing_j,
                       "mean_threshold_frac": self.oracle.mean_threshold_frac,
                       "dephasing_tol": self.oracle.dephasing_tol},
            "seed": self.seed,
            "lowpass_cutoff_hz": self.lowpass_cutoff_hz,
        }


def _require(doc: dict, key: str, allowed, where: str):
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    if key not in doc:
        raise ConfigError(f"{where}: missing required key '{key}'")


def _number(doc: dict, key: str, where: str, required: bool = True, default=None):
    if key not in doc:
        if required:
            raise ConfigError(f"{where}: missing required key '{key}'")
        return default
    v = doc[key]
    if not isinstance(v, (int, float)) or isinstance(v, bool):
        raise ConfigError(f"{where}.{key}: expected a number, got {v!r}")
    return float(v)


def parse_config(text: str) -> RunConfig:
    """Parse a JSON configuration document into a validated RunConfig."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"not valid JSON: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("top level must be a JSON object")
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"top level: unknown keys {sorted(unknown)}")

    convention = doc.get("gamma_convention", "angular")
    if convention not in GAMMA_CONVENTIONS:
        raise ConfigError(f"gamma_convention: must be one of {GAMMA_CONVENTIONS}")
    gamma_raw = _number(doc, "gamma", "params")
    gamma = gamma_from_cycles(gamma_raw) if convention == "cycles" else gamma_raw

    prior_raw = doc.get("prior_b_variance")
    if prior_raw is None:
        raise ConfigError("params: missing required key 'prior_b_variance'")
    if isinstance(prior_raw, str):
        if prior_raw.lower() not in ("infinite", "inf"):
            raise ConfigError("prior_b_variance: number or the string 'infinite'")
        prior = INFINITE
    elif isinstance(prior_raw, (int, float)) and not isinstance(prior_raw, bool):
        prior = float(prior_raw)
    else:
        raise ConfigError("prior_b_variance: number or the string 'infinite'")

    params = PhysicalParams(
        j_total=_number(doc, "j_total", "params"),
        gamma=gamma,
        b_true=_number(doc, "b_true", "params"),
        meas_strength=_number(doc, "meas_strength", "params"),
        efficiency=_number(doc, "efficiency", "params"),
        prior_b_variance=prior,
        t_total=_number(doc, "t_total", "params"),
    )
    try:
        validate_params(params)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    grid_doc = doc.get("grid", {})
    if not isinstance(grid_doc, dict):
        raise ConfigError("grid: expected an object")
    if set(grid_doc) - _GRID_KEYS:
        raise ConfigError(f"grid: unknown keys {sorted(set(grid_doc) - _GRID_KEYS)}")
    log_prefix = grid_doc.get("log_prefix", "auto")
    if log_prefix not in ("auto", True, False):
        raise ConfigError("grid.log_prefix: expected 'auto', true, or false")
    grid = GridConfig(
        dt=_number(grid_doc, "dt", "grid", required=False),
        log_prefix=log_prefix,
        prefix_ratio=_number(grid_doc, "prefix_ratio", "grid", required=False, default=1.2),
        prefix_safety=_number(grid_doc, "prefix_safety", "grid", required=False, default=0.2),
    )

    ens_doc = doc.get("ensemble", {})
    if not isinstance(ens_doc, dict):
        raise ConfigError("ensemble: expected an object")
    if set(ens_doc) - _ENSEMBLE_KEYS:
        raise ConfigError(f"ensemble: unknown keys {sorted(set(ens_doc) - _ENSEMBLE_KEYS)}")
    estimators = tuple(ens_doc.get("estimators", ("qkf", "regression")))
    window = tuple(ens_doc.get("mse_ratio_window", (0.9, 1.1)))
    if len(window) != 2 or not window[0] < window[1]:
        raise ConfigError("ensemble.mse_ratio_window: expected [lo, hi] with lo < hi")
    ensemble = EnsembleConfig(
        n_traj=int(_number(ens_doc, "n_traj", "ensemble", required=False, default=10_000)),
        estimators=estimators,
        checkpoints_per_decade=int(_number(ens_doc, "checkpoints_per_decade", "ensemble",
                                           required=False, default=30)),
        first_checkpoint=_number(ens_doc, "first_checkpoint", "ensemble", required=False),
        checkpoint_times=tuple(ens_doc.get("checkpoint_times", ())),
        mse_ratio_window=window,
    )

    sc_doc = doc.get("scaling", {})
    if not isinstance(sc_doc, dict):
        raise ConfigError("scaling: expected an object")
    if set(sc_doc) - _SCALING_KEYS:
        raise ConfigError(f"scaling: unknown keys {sorted(set(sc_doc) - _SCALING_KEYS)}")
    scaling = ScalingConfig(
        j_values=tuple(sc_doc.get("j_values", (1e4, 1e5, 1e6, 4e6))),
        t_check=_number(sc_doc, "t_check", "scaling", required=False),
        n_traj=int(_number(sc_doc, "n_traj", "scaling", required=False, default=2000)),
        slope_window=tuple(sc_doc.get("slope_window", (-1.05, -0.95))),
        shotnoise_slope_tol=_number(sc_doc, "shotnoise_slope_tol", "scaling",
                                    required=False, default=1e-9),
    )

    or_doc = doc.get("oracle", {})
    if not isinstance(or_doc, dict):
        raise ConfigError("oracle: expected an object")
    if set(or_doc) - _ORACLE_KEYS:
        raise ConfigError(f"oracle: unknown keys {sorted(set(or_doc) - _ORACLE_KEYS)}")
    oracle = OracleConfig(
        j_small=_number(or_doc, "j_small", "oracle", required=False, default=10.0),
        mt_max=_number(or_doc, "mt_max", "oracle", required=False, default=0.1),
        dephasing_j=_number(or_doc, "dephasing_j", "oracle", required=False, default=5.0),
        mean_threshold_frac=_number(or_doc, "mean_threshold_frac", "oracle",
                                    required=False, default=0.05),
        dephasing_tol=_number(or_doc, "dephasing_tol", "oracle", required=False, default=0.01),
    )

    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or not (0 <= seed < 2**64):
        raise ConfigError("seed: expected a 64-bit non-negative integer")

    return RunConfig(
        params=params, gamma_convention=convention, gamma_raw=gamma_raw,
        grid=grid, ensemble=ensemble, scaling=scaling, oracle=oracle, seed=seed,
        lowpass_cutoff_hz=_number(doc, "lowpass_cutoff_hz", "top", required=False),
    )


def load_config(path: str) -> RunConfig:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config(f.read())


def load_preset(name: str) -> RunConfig:
    """Shipped presets: fig1, fig2, scaling, oracle."""
    res = importlib.resources.files("qkfmag").joinpath("presets", f"{name}.json")
    try:
        text = res.read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise ConfigError(f"no preset named {name!r}") from exc
    return parse_config(text)


def override(cfg: RunConfig, seed: int | None = None, n_traj: int | None = None,
             gamma_convention: str | None = None) -> RunConfig:
    """Apply CLI-level overrides; gamma is re-converted from its raw value."""
    out = cfg
    if seed is not None:
        if not (0 <= seed < 2**64):
            raise ConfigError("seed: expected a 64-bit non-negative integer")
        out = replace(out, seed=seed)
    if n_traj is not None:
        out = replace(out, ensemble=replace(out.ensemble, n_traj=n_traj),
                      scaling=replace(out.scaling, n_traj=n_traj))
    if gamma_convention is not None and gamma_convention != out.gamma_convention:
        if gamma_convention not in GAMMA_CONVENTIONS:
            raise ConfigError(f"gamma_convention: must be one of {GAMMA_CONVENTIONS}")
        gamma = (gamma_from_cycles(out.gamma_raw) if gamma_convention == "cycles"
                 else out.gamma_raw)
        out = replace(out, gamma_convention=gamma_convention,
                      params=replace(out.params, gamma=gamma))
    return out
