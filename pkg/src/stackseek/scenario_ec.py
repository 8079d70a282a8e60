"""Energy-community scenario construction.

Builds the simulated test case: per-prosumer device models (shiftable load,
battery, EV, PV), their affine local constraint sets, offtake and injection
maps, and the leader parameters.  Also generates synthetic desk-scale
instances with a diurnal structure so the full pipeline can run without
external data.

Decision-vector layout per prosumer (length m_i * T), in component order:
load offtake, battery charge, EV charge, battery discharge-to-self,
PV self-consumption, battery grid injection, PV grid injection — each block
of length T, present only when the prosumer owns the device.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .game_model import FollowerGame, GameConstructionError, LeaderParams, ProsumerParams
from .qp_engine import Polyhedron


class ScenarioError(ValueError):
    pass


# -- device specs -------------------------------------------------------------

@dataclass(frozen=True)
class LoadSpec:
    """Partially shiftable load: per-slot caps around a baseline plus a
    daily-demand equality."""
    baseline: tuple
    shiftable_fraction: float

    def __post_init__(self):
        b = np.asarray(self.baseline, dtype=float)
        if np.any(b < 0):
            raise ScenarioError("load baseline must be nonnegative")
        if not 0.0 <= self.shiftable_fraction <= 1.0:
            raise ScenarioError("shiftable fraction must lie in [0, 1]")
        object.__setattr__(self, "baseline", tuple(float(v) for v in b))

    def bounds(self):
        b = np.asarray(self.baseline)
        s = self.shiftable_fraction
        return (1.0 - s) * b, (1.0 + s) * b

    @property
    def daily_demand(self) -> float:
        return float(np.sum(np.asarray(self.baseline)))


@dataclass(frozen=True)
class BatterySpec:
    charge_cap: float
    discharge_cap: float
    capacity: float
    eff_charge: float = 0.95
    eff_discharge: float = 0.95
    soc_init: float = 0.0
    terminal: str | float = "cyclic"    # "cyclic", "free", or a target SoC

    def __post_init__(self):
        if min(self.charge_cap, self.discharge_cap, self.capacity) < 0:
            raise ScenarioError("battery caps and capacity must be >= 0")
        if not (0 < self.eff_charge <= 1 and 0 < self.eff_discharge <= 1):
            raise ScenarioError("battery efficiencies must lie in (0, 1]")
        if not 0 <= self.soc_init <= self.capacity:
            raise ScenarioError("initial SoC outside [0, capacity]")
        if isinstance(self.terminal, str) and self.terminal not in ("cyclic", "free"):
            raise ScenarioError(f"unknown terminal SoC rule {self.terminal!r}")


@dataclass(frozen=True)
class EvSpec:
    power_cap: float
    window: tuple                        # (first, last) slot, 1-based inclusive
    required_energy: float

    def __post_init__(self):
        lo, hi = self.window
        if lo < 1 or hi < lo:
            raise ScenarioError(f"EV window {self.window} is empty or invalid")
        if self.power_cap < 0 or self.required_energy < 0:
            raise ScenarioError("EV power cap and energy must be >= 0")
        if self.required_energy > self.power_cap * (hi - lo + 1) + 1e-12:
            raise ScenarioError(
                f"EV energy {self.required_energy} not deliverable at cap "
                f"{self.power_cap} within window {self.window}")
        object.__setattr__(self, "window", (int(lo), int(hi)))


@dataclass(frozen=True)
class PvSpec:
    forecast: tuple

    def __post_init__(self):
        f = np.asarray(self.forecast, dtype=float)
        if np.any(f < 0):
            raise ScenarioError("PV forecast must be nonnegative")
        object.__setattr__(self, "forecast", tuple(float(v) for v in f))


@dataclass(frozen=True)
class ProsumerSpec:
    pi: float
    load: LoadSpec | None = None
    battery: BatterySpec | None = None
    ev: EvSpec | None = None
    pv: PvSpec | None = None
    injection_cap: tuple | None = None   # optional per-slot cap on injections

    def blocks(self) -> list[str]:
        """Component names in the fixed layout order."""
        out = []
        if self.load:
            out.append("load")
        if self.battery:
            out.append("bat_charge")
        if self.ev:
            out.append("ev")
        if self.battery:
            out.append("bat_self")
        if self.pv:
            out.append("pv_self")
        if self.battery:
            out.append("bat_inject")
        if self.pv:
            out.append("pv_inject")
        return out


@dataclass
class ScenarioConfig:
    n: int
    t: int
    retail_price: np.ndarray
    coupling_bound: np.ndarray
    prosumers: list[ProsumerSpec]
    mu: float = 1000.0
    ridge: float = 50.0
    target_sum: float = 2.4
    lambda_mat: np.ndarray | None = None   # None means identity
    seed: int = 0

    def __post_init__(self):
        if self.n < 1 or self.t < 1:
            raise ScenarioError("need n >= 1 prosumers and t >= 1 slots")
        if len(self.prosumers) != self.n:
            raise ScenarioError("prosumer list length must equal n")
        self.retail_price = np.asarray(self.retail_price, dtype=float)
        self.coupling_bound = np.asarray(self.coupling_bound, dtype=float)
        if self.retail_price.shape != (self.t,):
            raise ScenarioError("retail price must have length t")
        if self.coupling_bound.shape != (self.t,):
            raise ScenarioError("coupling bound must have length t")


# -- per-prosumer assembly ----------------------------------------------------

def _cumsum_matrix(T: int) -> np.ndarray:
    return np.tril(np.ones((T, T)))


def _prosumer_dim(spec: ProsumerSpec, T: int) -> int:
    return T * len(spec.blocks())


def _block_offsets(spec: ProsumerSpec, T: int) -> dict[str, int]:
    return {name: i * T for i, name in enumerate(spec.blocks())}


def _build_prosumer(spec: ProsumerSpec, T: int, idx: int) -> ProsumerParams:
    blocks = spec.blocks()
    if not blocks:
        raise ScenarioError(f"prosumer {idx} has no devices")
    off = _block_offsets(spec, T)
    n = T * len(blocks)
    rows_G: list[np.ndarray] = []
    rows_h: list[np.ndarray] = []
    r = np.zeros(n)
    A = np.zeros((T, n))
    I = np.eye(T)

    def put(block: str, mat: np.ndarray) -> np.ndarray:
        out = np.zeros((mat.shape[0], n))
        out[:, off[block]:off[block] + T] = mat
        return out

    if spec.load:
        lo, hi = spec.load.bounds()
        demand = spec.load.daily_demand
        if not (np.sum(lo) - 1e-9 <= demand <= np.sum(hi) + 1e-9):
            raise ScenarioError(
                f"prosumer {idx}: load daily demand {demand} unreachable "
                f"within per-slot bounds")
        rows_G += [put("load", I), put("load", -I),
                   put("load", np.ones((1, T))), put("load", -np.ones((1, T)))]
        rows_h += [hi, -lo, np.array([demand]), np.array([-demand])]
        r[off["load"]:off["load"] + T] = spec.load.baseline
        A[:, off["load"]:off["load"] + T] = I

    if spec.battery:
        bat = spec.battery
        Cm = _cumsum_matrix(T)
        ch, sf, inj = off["bat_charge"], off["bat_self"], off["bat_inject"]
        rows_G += [put("bat_charge", I), put("bat_charge", -I),
                   put("bat_self", -I), put("bat_inject", -I)]
        rows_h += [np.full(T, bat.charge_cap), np.zeros(T), np.zeros(T), np.zeros(T)]
        # total discharge cap
        D = np.zeros((T, n))
        D[:, sf:sf + T] = I
        D[:, inj:inj + T] = I
        rows_G.append(D)
        rows_h.append(np.full(T, bat.discharge_cap))
        # SoC recursion: soc = soc_init + cumsum(eff_c * charge - (self+inject)/eff_d)
        S = np.zeros((T, n))
        S[:, ch:ch + T] = bat.eff_charge * Cm
        S[:, sf:sf + T] = -Cm / bat.eff_discharge
        S[:, inj:inj + T] = -Cm / bat.eff_discharge
        rows_G += [S, -S]
        rows_h += [np.full(T, bat.capacity - bat.soc_init),
                   np.full(T, bat.soc_init)]
        if spec.battery.terminal != "free":
            target = bat.soc_init if bat.terminal == "cyclic" else float(bat.terminal)
            if not 0 <= target <= bat.capacity:
                raise ScenarioError(f"prosumer {idx}: terminal SoC outside range")
            last = S[-1:, :]
            rows_G += [last, -last]
            rhs = target - bat.soc_init
            rows_h += [np.array([rhs]), np.array([-rhs])]
        A[:, ch:ch + T] += I
        A[:, sf:sf + T] -= I

    if spec.ev:
        ev = spec.ev
        lo_t, hi_t = ev.window[0] - 1, ev.window[1] - 1
        if hi_t >= T:
            raise ScenarioError(f"prosumer {idx}: EV window exceeds horizon")
        ub = np.zeros(T)
        ub[lo_t:hi_t + 1] = ev.power_cap
        rows_G += [put("ev", I), put("ev", -I)]
        rows_h += [ub, np.zeros(T)]
        w = np.zeros((1, T))
        w[0, lo_t:hi_t + 1] = 1.0
        rows_G += [put("ev", w), put("ev", -w)]
        rows_h += [np.array([ev.required_energy]), np.array([-ev.required_energy])]
        flat = np.zeros(T)
        flat[lo_t:hi_t + 1] = ev.required_energy / (hi_t - lo_t + 1)
        r[off["ev"]:off["ev"] + T] = flat
        A[:, off["ev"]:off["ev"] + T] = I

    if spec.pv:
        f = np.asarray(spec.pv.forecast)
        if f.shape != (T,):
            raise ScenarioError(f"prosumer {idx}: PV forecast length != horizon")
        sf, inj = off["pv_self"], off["pv_inject"]
        rows_G += [put("pv_self", -I), put("pv_inject", -I)]
        rows_h += [np.zeros(T), np.zeros(T)]
        Ssum = np.zeros((T, n))
        Ssum[:, sf:sf + T] = I
        Ssum[:, inj:inj + T] = I
        rows_G.append(Ssum)
        rows_h.append(f.copy())
        r[sf:sf + T] = f       # prefer self-consuming the full forecast
        A[:, sf:sf + T] -= I

    if spec.injection_cap is not None:
        cap = np.asarray(spec.injection_cap, dtype=float)
        if cap.shape != (T,):
            raise ScenarioError(f"prosumer {idx}: injection cap length != horizon")
        Inj = np.zeros((T, n))
        if spec.battery:
            Inj[:, off["bat_inject"]:off["bat_inject"] + T] += I
        if spec.pv:
            Inj[:, off["pv_inject"]:off["pv_inject"] + T] += I
        rows_G.append(Inj)
        rows_h.append(cap)

    G = np.vstack(rows_G)
    h = np.concatenate(rows_h)
    return ProsumerParams(r, A, Polyhedron(G, h), spec.pi)


def injection_map(spec: ProsumerSpec, T: int) -> np.ndarray:
    """T x (m_i T) map from decisions to hourly grid injection."""
    off = _block_offsets(spec, T)
    n = _prosumer_dim(spec, T)
    M = np.zeros((T, n))
    I = np.eye(T)
    if spec.battery:
        M[:, off["bat_inject"]:off["bat_inject"] + T] = I
    if spec.pv:
        M[:, off["pv_inject"]:off["pv_inject"] + T] += I
    return M


def aggregate_injection_map(config: ScenarioConfig) -> np.ndarray:
    return np.hstack([injection_map(s, config.t) for s in config.prosumers])


def build(config: ScenarioConfig) -> tuple[FollowerGame, LeaderParams]:
    """Assemble the follower game and leader parameters from a config."""
    prosumers = tuple(_build_prosumer(s, config.t, i)
                      for i, s in enumerate(config.prosumers))
    game = FollowerGame(prosumers, config.retail_price, config.coupling_bound)
    lam = np.eye(config.t) if config.lambda_mat is None else config.lambda_mat
    leader = LeaderParams(lam, config.mu, config.ridge, config.target_sum,
                          game.aggregate_map())
    return game, leader


# -- synthetic generation -----------------------------------------------------

def _diurnal(T: int, peak_at: float, width: float) -> np.ndarray:
    t = np.arange(T)
    return np.exp(-0.5 * ((t - peak_at) / width) ** 2)


def generate_synthetic(seed: int, n: int = 10, t: int = 24,
                       device_mix: dict | None = None) -> ScenarioConfig:
    """Deterministic synthetic scenario with a diurnal structure.

    device_mix gives device counts, e.g. {"battery": 2, "ev": 1, "pv": 2};
    every prosumer gets a partially shiftable load.  Desired profiles are
    feasible by construction, and the coupling bound sits just above the
    aggregate offtake at the desired profiles so it can become active when
    responses shift.
    """
    mix = {"battery": 2, "ev": 1, "pv": 2}
    if device_mix:
        mix.update(device_mix)
    rng = np.random.Generator(np.random.Philox(seed))

    price = (0.12 + 0.05 * _diurnal(t, 0.75 * t, 0.12 * t)
             + 0.03 * _diurnal(t, 0.35 * t, 0.10 * t)
             + rng.uniform(-0.005, 0.005, size=t))
    price = np.maximum(price, 0.02)

    has = {"battery": set(), "ev": set(), "pv": set()}
    cursor = 0
    for dev in ("battery", "ev", "pv"):
        for _ in range(int(mix.get(dev, 0))):
            has[dev].add(cursor % n)
            cursor += 1

    specs = []
    for i in range(n):
        base = ((0.3 + 0.25 * _diurnal(t, 0.78 * t, 0.13 * t)
                 + 0.2 * _diurnal(t, 0.33 * t, 0.10 * t))
                * rng.uniform(0.6, 1.6))
        base = np.maximum(base + rng.uniform(-0.03, 0.03, size=t), 0.05)
        load = LoadSpec(tuple(base), float(rng.uniform(0.2, 0.45)))
        battery = None
        if i in has["battery"]:
            cap = float(rng.uniform(5.0, 9.0))
            battery = BatterySpec(
                charge_cap=float(rng.uniform(2.0, 3.5)),
                discharge_cap=float(rng.uniform(2.0, 3.5)),
                capacity=cap,
                eff_charge=float(rng.uniform(0.92, 0.97)),
                eff_discharge=float(rng.uniform(0.92, 0.97)),
                soc_init=0.5 * cap, terminal="cyclic")
        ev = None
        if i in has["ev"]:
            w_len = int(rng.integers(4, 8))
            start = int(rng.integers(max(1, int(0.7 * t) - 2), t - w_len))
            cap = float(rng.uniform(3.0, 6.0))
            ev = EvSpec(cap, (start, start + w_len - 1),
                        float(rng.uniform(0.35, 0.6)) * cap * w_len)
        pv = None
        if i in has["pv"]:
            fc = float(rng.uniform(1.0, 3.0)) * _diurnal(t, 0.54 * t, 0.12 * t)
            pv = PvSpec(tuple(np.maximum(fc, 0.0)))
        specs.append(ProsumerSpec(pi=float(rng.uniform(1.0, 3.0)), load=load,
                                  battery=battery, ev=ev, pv=pv))

    # Offtake at the desired profiles is feasible by construction; the bound
    # sits a few percent above it.
    nominal = np.zeros(t)
    for s in specs:
        nominal += np.asarray(s.load.baseline)
        if s.ev:
            lo, hi = s.ev.window
            flat = np.zeros(t)
            flat[lo - 1:hi] = s.ev.required_energy / (hi - lo + 1)
            nominal += flat
        if s.pv:
            nominal -= np.asarray(s.pv.forecast)
    bound = nominal + 0.04 * np.max(np.abs(nominal)) + 0.1

    return ScenarioConfig(
        n=n, t=t, retail_price=price, coupling_bound=bound, prosumers=specs,
        mu=1000.0, ridge=50.0, target_sum=round(0.1 * t, 6), seed=seed)


# -- serialization -------------------------------------------------------------

def read_hourly_csv(path, t: int) -> np.ndarray:
    """Read a `hour,value` CSV into a length-t vector (hours 1..t)."""
    vals = np.full(t, np.nan)
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        for row in rd:
            hr = int(row["hour"])
            if not 1 <= hr <= t:
                raise ScenarioError(f"hour {hr} outside 1..{t} in {path}")
            vals[hr - 1] = float(row["value"])
    if np.any(np.isnan(vals)):
        raise ScenarioError(f"missing hours in {path}")
    return vals


def config_to_dict(config: ScenarioConfig) -> dict:
    def spec_dict(s: ProsumerSpec) -> dict:
        return {
            "pi": s.pi,
            "load": None if s.load is None else {
                "baseline": list(s.load.baseline),
                "shiftable_fraction": s.load.shiftable_fraction},
            "battery": None if s.battery is None else {
                "charge_cap": s.battery.charge_cap,
                "discharge_cap": s.battery.discharge_cap,
                "capacity": s.battery.capacity,
                "eff_charge": s.battery.eff_charge,
                "eff_discharge": s.battery.eff_discharge,
                "soc_init": s.battery.soc_init,
                "terminal": s.battery.terminal},
            "ev": None if s.ev is None else {
                "power_cap": s.ev.power_cap, "window": list(s.ev.window),
                "required_energy": s.ev.required_energy},
            "pv": None if s.pv is None else {"forecast": list(s.pv.forecast)},
            "injection_cap": None if s.injection_cap is None
            else list(s.injection_cap),
        }

    return {
        "n": config.n, "t": config.t, "seed": config.seed,
        "retail_price": list(config.retail_price),
        "coupling_bound": list(config.coupling_bound),
        "leader": {
            "lambda": "identity" if config.lambda_mat is None
            else [list(row) for row in config.lambda_mat],
            "mu": config.mu, "ridge": config.ridge,
            "target_sum": config.target_sum},
        "prosumers": [spec_dict(s) for s in config.prosumers],
    }


def config_from_dict(obj: dict, base_dir: Path | None = None) -> ScenarioConfig:
    t = int(obj["t"])

    def vec(key: str) -> np.ndarray:
        if f"{key}_csv" in obj:
            path = Path(obj[f"{key}_csv"])
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            return read_hourly_csv(path, t)
        return np.asarray(obj[key], dtype=float)

    specs = []
    for sd in obj["prosumers"]:
        load = battery = ev = pv = None
        if sd.get("load"):
            load = LoadSpec(tuple(sd["load"]["baseline"]),
                            float(sd["load"]["shiftable_fraction"]))
        if sd.get("battery"):
            b = sd["battery"]
            term = b.get("terminal", "cyclic")
            battery = BatterySpec(b["charge_cap"], b["discharge_cap"],
                                  b["capacity"], b["eff_charge"],
                                  b["eff_discharge"], b["soc_init"],
                                  term if isinstance(term, str) else float(term))
        if sd.get("ev"):
            ev = EvSpec(sd["ev"]["power_cap"], tuple(sd["ev"]["window"]),
                        sd["ev"]["required_energy"])
        if sd.get("pv"):
            if "forecast_csv" in sd["pv"]:
                path = Path(sd["pv"]["forecast_csv"])
                if base_dir is not None and not path.is_absolute():
                    path = base_dir / path
                fc = tuple(read_hourly_csv(path, t))
            else:
                fc = tuple(sd["pv"]["forecast"])
            pv = PvSpec(fc)
        inj = sd.get("injection_cap")
        specs.append(ProsumerSpec(float(sd["pi"]), load, battery, ev, pv,
                                  None if inj is None else tuple(inj)))

    leader = obj.get("leader", {})
    lam = leader.get("lambda", "identity")
    return ScenarioConfig(
        n=int(obj["n"]), t=t, retail_price=vec("retail_price"),
        coupling_bound=vec("coupling_bound"), prosumers=specs,
        mu=float(leader.get("mu", 1000.0)),
        ridge=float(leader.get("ridge", 50.0)),
        target_sum=float(leader.get("target_sum", 2.4)),
        lambda_mat=None if lam == "identity" else np.asarray(lam, dtype=float),
        seed=int(obj.get("seed", 0)))


def save_config(config: ScenarioConfig, path):
    with open(path, "w") as fh:
        json.dump(config_to_dict(config), fh, indent=1)


def load_config(path) -> ScenarioConfig:
    path = Path(path)
    with open(path) as fh:
        return config_from_dict(json.load(fh), base_dir=path.parent)
