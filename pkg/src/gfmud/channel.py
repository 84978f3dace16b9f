"""Channel coefficients for the macro-cell model and the indoor-factory mmWave models.

A coefficient is ``g = sqrt(beta) * h_s`` with ``h_s ~ CN(0, 1)`` and the
large-scale gain ``beta`` built from pathloss and log-normal shadowing.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

__all__ = [
    "ChannelError",
    "RayleighConfig",
    "MacroChannelConfig",
    "InfScenario",
    "ChannelDraw",
    "INF_TABLE",
    "as_rng",
    "sample_small_scale",
    "macro_pathloss_db",
    "noise_power_w",
    "inf_distance_3d",
    "inf_k_s",
    "inf_los_probability",
    "inf_pathloss_db",
    "sample_positions",
    "sample_channel",
]


class ChannelError(ValueError):
    pass


def as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass(frozen=True)
class RayleighConfig:
    """Small-scale fading only (``beta = 1``)."""

    kind: str = "rayleigh"


@dataclass(frozen=True)
class MacroChannelConfig:
    shadow_std_db: float = 8.0
    pl_intercept: float = 128.1
    pl_slope: float = 37.6
    r_min_km: float = 0.05
    r_max_km: float = 0.25
    n0_dbm_hz: float = -174.0
    bandwidth_hz: float = 1e6
    noise_figure_db: float = 4.0
    tx_power_dbm: float = 23.0
    kind: str = "macro"

    def __post_init__(self):
        if not 0 < self.r_min_km <= self.r_max_km:
            raise ChannelError("device distances must be positive")
        if self.bandwidth_hz <= 0:
            raise ChannelError("bandwidth must be positive")


# kind: (h_bs, h_mtd, clutter density, clutter height, clutter size,
#        r2d_min, r2d_max, a, b, sigma_nlos)
INF_TABLE = {
    "SL": (1.5, 1.5, 0.20, 2.0, 10.0, 25.0, 200.0, 33.00, 25.50, 5.70),
    "DL": (1.5, 1.5, 0.60, 6.0, 2.0, 18.0, 108.0, 18.60, 35.70, 7.20),
    "SH": (8.0, 1.5, 0.20, 2.0, 10.0, 40.0, 488.0, 32.40, 23.00, 5.90),
    "DH": (8.0, 1.5, 0.60, 6.0, 2.0, 24.0, 420.0, 33.63, 21.90, 4.00),
}


@dataclass(frozen=True)
class InfScenario:
    name: str
    h_bs: float
    h_mtd: float
    clutter_density: float
    clutter_height: float
    clutter_size: float
    r2d_min: float
    r2d_max: float
    a: float
    b: float
    sigma_nlos: float
    sigma_los: float = 4.3
    fc_ghz: float = 28.0
    n0_dbm_hz: float = -174.0
    bandwidth_hz: float = 100e6
    noise_figure_db: float = 4.0
    tx_power_dbm: float = 23.0
    shadow_before_max: bool = False
    kind: str = "inf"

    @classmethod
    def preset(cls, name: str, **overrides) -> "InfScenario":
        key = name.upper().removeprefix("INF-")
        if key not in INF_TABLE:
            raise ChannelError(f"unknown indoor-factory scenario {name!r}")
        return replace(cls(key, *INF_TABLE[key]), **overrides)

    @property
    def high_bs(self) -> bool:
        return self.name in ("SH", "DH")


@dataclass
class ChannelDraw:
    gain: np.ndarray                   # complex g_i
    pathloss_db: np.ndarray
    shadowing_db: np.ndarray
    small_scale: np.ndarray
    los: np.ndarray | None = None

    @property
    def large_scale(self) -> np.ndarray:
        """Linear-scale large-scale gain beta."""
        return 10.0 ** (-(self.pathloss_db + self.shadowing_db) / 10.0)


def sample_small_scale(count, seed=None) -> np.ndarray:
    """i.i.d. CN(0, 1) draws; `count` may be an int or a shape tuple."""
    rng = as_rng(seed)
    shape = (count,) if np.isscalar(count) else tuple(count)
    if np.prod(shape) < 1:
        raise ChannelError("count must be >= 1")
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)


def macro_pathloss_db(r_km, intercept: float = 128.1, slope: float = 37.6):
    r = np.asarray(r_km, dtype=float)
    if np.any(r <= 0):
        raise ChannelError("distance must be positive")
    out = intercept + slope * np.log10(r)
    return float(out) if out.ndim == 0 else out


def noise_power_w(n0_dbm_hz: float = -174.0, bandwidth_hz: float = 1e6, noise_figure_db: float = 4.0) -> float:
    """Thermal noise power in watts."""
    return 10.0 ** ((n0_dbm_hz + 10 * np.log10(bandwidth_hz) + noise_figure_db - 30.0) / 10.0)


def inf_distance_3d(scenario: InfScenario, r2d):
    return np.sqrt(np.asarray(r2d, dtype=float) ** 2 + (scenario.h_bs - scenario.h_mtd) ** 2)


def inf_k_s(scenario: InfScenario) -> float:
    s = scenario.clutter_density
    if not 0 < s < 1:
        raise ChannelError(f"clutter density {s} must lie strictly between 0 and 1")
    k = -scenario.clutter_size / np.log(1.0 - s)
    if scenario.high_bs:
        k *= (scenario.h_bs - scenario.h_mtd) / (scenario.clutter_height - scenario.h_mtd)
    return float(k)


def inf_los_probability(scenario: InfScenario, r2d):
    r = np.asarray(r2d, dtype=float)
    if np.any(r < 0):
        raise ChannelError("2D distance must be non-negative")
    out = np.exp(-r / inf_k_s(scenario))
    return float(out) if out.ndim == 0 else out


def _inf_means(scenario: InfScenario, r3d):
    r3d = np.asarray(r3d, dtype=float)
    if np.any(r3d < 1.0) or np.any(r3d > 600.0):
        raise ChannelError("3D distance must lie in [1, 600] m")
    lf = np.log10(scenario.fc_ghz)
    pl_los = 31.84 + 21.50 * np.log10(r3d) + 19.00 * lf
    pl_nlos = scenario.a + scenario.b * np.log10(r3d) + 20.00 * lf
    return pl_los, pl_nlos


def inf_pathloss_db(scenario: InfScenario, r3d, los, seed=None, shadowing: bool = True):
    """Pathloss (dB) including shadowing.

    NLOS takes the larger of the LOS and NLOS deterministic parts and adds one
    shadowing term with the winning branch's deviation. With
    ``scenario.shadow_before_max`` both branches are shadowed before the max.
    """
    rng = as_rng(seed)
    pl_los, pl_nlos = _inf_means(scenario, r3d)
    los = np.broadcast_to(np.asarray(los, dtype=bool), pl_los.shape)
    if not shadowing:
        out = np.where(los, pl_los, np.maximum(pl_los, pl_nlos))
    elif scenario.shadow_before_max:
        x_los = pl_los + scenario.sigma_los * rng.standard_normal(pl_los.shape)
        x_nlos = pl_nlos + scenario.sigma_nlos * rng.standard_normal(pl_los.shape)
        out = np.where(los, x_los, np.maximum(x_los, x_nlos))
    else:
        nlos_wins = (~los) & (pl_nlos > pl_los)
        mean = np.where(nlos_wins, pl_nlos, pl_los)
        sigma = np.where(nlos_wins, scenario.sigma_nlos, scenario.sigma_los)
        out = mean + sigma * rng.standard_normal(pl_los.shape)
    return float(out) if np.ndim(out) == 0 else out


def sample_positions(config, shape, seed=None) -> np.ndarray:
    """Device distances: r_km for the macro model, r2D in metres for InF."""
    rng = as_rng(seed)
    if isinstance(config, MacroChannelConfig):
        return rng.uniform(config.r_min_km, config.r_max_km, size=shape)
    if isinstance(config, InfScenario):
        return rng.uniform(config.r2d_min, config.r2d_max, size=shape)
    return np.zeros(shape)


def sample_channel(config, positions, seed=None, shadowing: bool = True, small_scale=None) -> ChannelDraw:
    """Draw g for every entry of `positions`.

    `small_scale` overrides the CN(0, 1) draw (e.g. all-ones to isolate the
    large-scale part).
    """
    rng = as_rng(seed)
    positions = np.asarray(positions, dtype=float)
    shape = positions.shape
    h = sample_small_scale(shape, rng) if small_scale is None else np.broadcast_to(
        np.asarray(small_scale, dtype=complex), shape).copy()
    los = None
    if isinstance(config, RayleighConfig):
        pl = np.zeros(shape)
        sh = np.zeros(shape)
    elif isinstance(config, MacroChannelConfig):
        pl = macro_pathloss_db(positions, config.pl_intercept, config.pl_slope) * np.ones(shape)
        sh = (config.shadow_std_db * rng.standard_normal(shape)) if shadowing else np.zeros(shape)
    elif isinstance(config, InfScenario):
        los = rng.random(shape) < inf_los_probability(config, positions)
        r3d = inf_distance_3d(config, positions)
        pl_los, pl_nlos = _inf_means(config, r3d)
        pl = np.where(los, pl_los, np.maximum(pl_los, pl_nlos))
        total = inf_pathloss_db(config, r3d, los, rng, shadowing=shadowing)
        sh = np.asarray(total) - pl
    else:
        raise ChannelError(f"unsupported channel config {type(config).__name__}")
    beta = 10.0 ** (-(pl + sh) / 10.0)
    return ChannelDraw(gain=np.sqrt(beta) * h, pathloss_db=pl, shadowing_db=sh, small_scale=h, los=los)


def transmit_scale(config) -> tuple[float, float]:
    """(transmit power in W, noise power in W) for physically scaled draws."""
    if isinstance(config, RayleighConfig):
        return 1.0, 1.0
    p_tx = 10.0 ** ((config.tx_power_dbm - 30.0) / 10.0)
    return p_tx, noise_power_w(config.n0_dbm_hz, config.bandwidth_hz, config.noise_figure_db)
