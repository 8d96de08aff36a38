"""Synthetic electric-powertrain test-bench measurements.

A first-order drive-cycle simulator producing the 13 channels of a battery
electric drive unit (EDU) on a powertrain test bench: vehicle speed, torques,
currents, voltages, temperatures and battery state of charge (SoC). Initial
SoC and temperatures vary per run, so repeated runs of one drive cycle differ.
Four anomaly injectors mirror real test-bench faults.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dataset import write_sequence
from .metrics import NORMAL, SUBSEQ_ANOMALY, TS_ANOMALY, GroundTruth
from .preprocess import Sequence

RATE = 2.0
DT = 1.0 / RATE
AMBIENT = 25.0
GRAVITY = 9.81

CHANNELS = [
    "vehicle_speed",
    "edu_torque",
    "left_axle_torque",
    "right_axle_torque",
    "edu_current",
    "edu_voltage",
    "hvb_current",
    "hvb_voltage",
    "hvb_temperature",
    "hvb_soc",
    "edu_rotor_temperature",
    "edu_stator_temperature",
    "inverter_temperature",
]

# per-channel sensor noise std in channel units
SENSOR_NOISE = np.array([0.05, 0.5, 2.0, 2.0, 0.3, 0.2, 0.3, 0.2, 0.05, 2e-5, 0.05, 0.05, 0.05])

ANOMALY_TYPES = ("wheel_diameter", "recuperation_off", "battery_simulator", "cooling_loss")

ROOT_CAUSE_CHANNELS = {
    "wheel_diameter": frozenset({0}),
    "recuperation_off": frozenset({1, 2, 3, 9}),
    "battery_simulator": frozenset({4, 5, 6, 7}),
    "cooling_loss": frozenset({10, 11, 12}),
}

# magnitude that leaves the simulation untouched
NEUTRAL_MAGNITUDE = {
    "wheel_diameter": 1.0,
    "recuperation_off": 0.0,
    "battery_simulator": 0.0,
    "cooling_loss": 0.0,
}

DEFAULT_MAGNITUDE = {
    "wheel_diameter": 1.25,
    "recuperation_off": 1.0,
    "battery_simulator": 1.0,
    "cooling_loss": 0.7,
}


class InfeasibleCycle(RuntimeError):
    pass


@dataclass(frozen=True)
class VehicleParams:
    wheel_radius: float = 0.33
    gear_ratio: float = 9.0
    mass: float = 2000.0
    rolling_coeff: float = 0.012
    drag_area: float = 0.75  # Cd * A in m^2
    air_density: float = 1.2
    efficiency: float = 0.9
    max_motor_torque: float = 400.0
    max_regen_torque: float = 150.0
    battery_capacity: float = 100.0  # A h
    ocv_base: float = 360.0
    ocv_slope: float = 60.0  # V per unit SoC
    internal_resistance: float = 0.08
    cable_resistance: float = 0.01
    copper_loss_coeff: float = 0.01  # W per Nm^2
    inverter_loss_coeff: float = 1.5  # W per A
    # thermal: capacity (J/K) and conductance to coolant/ambient (W/K)
    tau_rotor: float = 600.0
    tau_stator: float = 300.0
    tau_inverter: float = 120.0
    tau_battery: float = 1800.0
    cooling_rotor: float = 25.0
    cooling_stator: float = 45.0
    cooling_inverter: float = 30.0
    cooling_battery: float = 25.0
    min_soc: float = 0.05

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not v > 0:
                raise ValueError(f"vehicle parameter {k} must be positive, got {v}")
        if self.efficiency > 1:
            raise ValueError("efficiency must lie in (0, 1]")


@dataclass(frozen=True)
class DriveCycleSpec:
    duration: float
    segments: tuple[tuple[float, float], ...] = ()  # (target speed km/h, hold s)
    tag: str = ""
    accel: float = 1.5  # m/s^2
    decel: float = 2.5

    def __post_init__(self):
        if not 300 <= self.duration <= 1800:
            raise ValueError(f"drive cycle duration {self.duration} s outside 300..1800 s")
        if any(v < 0 or hold < 0 for v, hold in self.segments):
            raise ValueError("segment speeds and hold times must be non-negative")

    @property
    def max_speed(self) -> float:
        return max((v for v, _ in self.segments), default=0.0)


@dataclass(frozen=True)
class AnomalySpec:
    type: str
    onset: str = "start"
    magnitude: float | None = None

    def __post_init__(self):
        if self.type not in ANOMALY_TYPES:
            raise ValueError(f"unknown anomaly type {self.type!r}")
        if self.onset not in ("start", "midpoint"):
            raise ValueError(f"unknown onset {self.onset!r}")
        if self.onset == "midpoint" and self.type != "cooling_loss":
            raise ValueError("only cooling_loss supports a midpoint onset")
        if self.magnitude is None:
            object.__setattr__(self, "magnitude", DEFAULT_MAGNITUDE[self.type])

    @property
    def root_cause_channels(self) -> frozenset[int]:
        return ROOT_CAUSE_CHANNELS[self.type]


@dataclass(frozen=True)
class InitState:
    soc: float = 0.8
    t_battery: float = AMBIENT
    t_rotor: float = AMBIENT
    t_stator: float = AMBIENT
    t_inverter: float = AMBIENT


# (name, duration s, speed range km/h, mean hold s, stop probability)
_CYCLE_TEMPLATES = [
    ("short_urban", 300, (15, 50), 25, 0.35),
    ("short_dynamic", 360, (30, 100), 12, 0.2),
    ("slow_city", 420, (10, 40), 30, 0.4),
    ("fast_highway", 480, (90, 140), 45, 0.0),
    ("suburban", 600, (30, 80), 35, 0.2),
    ("stop_and_go", 720, (5, 30), 15, 0.5),
    ("long_mixed", 900, (20, 130), 50, 0.15),
    ("long_highway", 1200, (70, 130), 80, 0.05),
]

CYCLE_NAMES = [t[0] for t in _CYCLE_TEMPLATES]


def standard_cycle(name: str) -> DriveCycleSpec:
    """The fixed segment list of one of the eight standard cycles."""
    idx = CYCLE_NAMES.index(name)
    _, duration, (lo, hi), hold, p_stop = _CYCLE_TEMPLATES[idx]
    rng = np.random.default_rng(1000 + idx)
    segments = [(0.0, 5.0)]
    elapsed = 5.0
    while elapsed < duration - 40.0:
        if rng.random() < p_stop:
            v = 0.0
        else:
            v = float(np.round(rng.uniform(lo, hi)))
        h = float(min(np.round(rng.exponential(hold) + 10), duration - 40.0 - elapsed))
        segments.append((v, h))
        elapsed += h
    segments.append((0.0, duration - elapsed))
    return DriveCycleSpec(float(duration), tuple(segments), name)


def gen_cycle(spec: DriveCycleSpec, rng: np.random.Generator) -> np.ndarray:
    """Vehicle speed profile (km/h) at 2 Hz: acceleration-bounded ramps plus smooth jitter."""
    n = int(round(spec.duration * RATE))
    jitter = rng.standard_normal(n)
    speed = np.zeros(n)
    if not spec.segments:
        return speed

    target = np.zeros(n)
    t = 0
    for v, hold in spec.segments:
        steps = int(round(hold * RATE))
        target[t:t + steps] = v
        t += steps
        if t >= n:
            break
    # targets beyond the scripted segments hold the final value
    if t < n:
        target[t:] = spec.segments[-1][0]

    up = spec.accel * 3.6 * DT
    down = spec.decel * 3.6 * DT
    v = 0.0
    for k in range(n):
        v = min(v + up, target[k]) if target[k] > v else max(v - down, target[k])
        speed[k] = v

    # driver imperfection: low-passed noise, scaled with speed, absent at standstill
    smooth = np.convolve(jitter, np.ones(9) / 3.0, mode="same")
    jittered = speed + 0.004 * speed * smooth
    jittered = np.where(speed < 0.5, 0.0, jittered)
    return np.clip(jittered, 0.0, spec.max_speed)


def draw_init_state(rng: np.random.Generator) -> InitState:
    warm = rng.uniform(0.0, 1.0)
    return InitState(
        soc=float(rng.uniform(0.45, 0.95)),
        t_battery=float(AMBIENT + rng.uniform(0.0, 12.0)),
        t_rotor=float(AMBIENT + 35.0 * warm + rng.uniform(0.0, 5.0)),
        t_stator=float(AMBIENT + 30.0 * warm + rng.uniform(0.0, 5.0)),
        t_inverter=float(AMBIENT + 15.0 * warm + rng.uniform(0.0, 3.0)),
    )


def simulate(profile: np.ndarray, vp: VehicleParams, init: InitState, rng: np.random.Generator,
             anomaly: AnomalySpec | None = None, seq_id: str = "", details: bool = False):
    """Simulate the 13 measured channels for a speed profile in km/h.

    With ``details=True`` also returns the noise-free internal signals.
    """
    profile = np.asarray(profile, dtype=float)
    n = profile.size
    # every random draw happens up front so injections never shift the stream
    noise = rng.standard_normal((n, len(CHANNELS))) * SENSOR_NOISE
    split = 0.5 + 0.004 * rng.standard_normal(n)

    wheel_factor = 1.0
    regen_scale = 1.0
    sim_blend = 0.0
    cooling_scale = np.ones(n)
    if anomaly is not None:
        m = float(anomaly.magnitude)
        if anomaly.type == "wheel_diameter":
            wheel_factor = m
        elif anomaly.type == "recuperation_off":
            regen_scale = 1.0 - m
        elif anomaly.type == "battery_simulator":
            sim_blend = m
        elif anomaly.type == "cooling_loss":
            onset = 0 if anomaly.onset == "start" else n // 2
            cooling_scale[onset:] = 1.0 - m

    v = profile / 3.6
    accel = np.gradient(v, DT) if n > 1 else np.zeros(n)
    moving = v > 0.01
    force = vp.mass * accel + moving * (vp.mass * GRAVITY * vp.rolling_coeff
                                        + 0.5 * vp.air_density * vp.drag_area * v ** 2)
    torque = force * vp.wheel_radius / vp.gear_ratio
    regen_limit = vp.max_regen_torque * regen_scale
    torque = np.clip(torque, -regen_limit, vp.max_motor_torque)
    omega = v / vp.wheel_radius * vp.gear_ratio
    p_mech = torque * omega
    p_elec = np.where(p_mech >= 0, p_mech / vp.efficiency, p_mech * vp.efficiency)

    cap_as = vp.battery_capacity * 3600.0
    soc = np.empty(n)
    i_hvb = np.empty(n)
    v_hvb = np.empty(n)
    s = init.soc
    flat_ocv = vp.ocv_base + vp.ocv_slope * 0.9
    stiff_r = 0.1 * vp.internal_resistance
    r_int = (1.0 - sim_blend) * vp.internal_resistance + sim_blend * stiff_r
    for k in range(n):
        ocv = (1.0 - sim_blend) * (vp.ocv_base + vp.ocv_slope * s) + sim_blend * flat_ocv
        disc = ocv * ocv - 4.0 * r_int * p_elec[k]
        if disc < 0:
            raise InfeasibleCycle(f"infeasible cycle: power demand {p_elec[k]:.0f} W exceeds battery limit")
        cur = (ocv - np.sqrt(disc)) / (2.0 * r_int)
        i_hvb[k] = cur
        v_hvb[k] = ocv - cur * r_int
        soc[k] = s
        s = s - cur * DT / cap_as
        if s < vp.min_soc:
            raise InfeasibleCycle(f"infeasible cycle: state of charge exhausted at step {k}")
    v_edu = v_hvb - i_hvb * vp.cable_resistance
    i_edu = p_elec / v_edu

    loss_edu = np.abs(p_elec - p_mech) + vp.copper_loss_coeff * torque ** 2
    heat = {
        "rotor": 0.4 * loss_edu,
        "stator": 0.6 * loss_edu,
        "inverter": vp.inverter_loss_coeff * np.abs(i_edu) + 0.01 * np.abs(p_elec),
        "battery": i_hvb ** 2 * r_int,
    }
    conductance = {
        "rotor": vp.cooling_rotor * cooling_scale,
        "stator": vp.cooling_stator * cooling_scale,
        "inverter": vp.cooling_inverter * cooling_scale,
        "battery": np.full(n, vp.cooling_battery),
    }
    capacity = {
        "rotor": vp.tau_rotor * vp.cooling_rotor,
        "stator": vp.tau_stator * vp.cooling_stator,
        "inverter": vp.tau_inverter * vp.cooling_inverter,
        "battery": vp.tau_battery * vp.cooling_battery,
    }
    temps = {}
    for part, t0 in (("battery", init.t_battery), ("rotor", init.t_rotor),
                     ("stator", init.t_stator), ("inverter", init.t_inverter)):
        temp = np.empty(n)
        T = t0
        for k in range(n):
            temp[k] = T
            T = T + DT * (heat[part][k] - conductance[part][k] * (T - AMBIENT)) / capacity[part]
        temps[part] = temp

    axle_total = torque * vp.gear_ratio
    clean = np.column_stack([
        profile * wheel_factor,
        torque,
        axle_total * split,
        axle_total * (1.0 - split),
        i_edu,
        v_edu,
        i_hvb,
        v_hvb,
        temps["battery"],
        soc,
        temps["rotor"],
        temps["stator"],
        temps["inverter"],
    ])
    measured = clean + noise
    if regen_limit == 0.0:
        measured[:, 1:4] = np.maximum(measured[:, 1:4], 0.0)
    seq = Sequence(measured, RATE, list(CHANNELS), seq_id)
    if details:
        return seq, {"clean": clean, "p_mech": p_mech, "p_elec": p_elec, "soc": soc,
                     "i_hvb": i_hvb, "v_hvb": v_hvb}
    return seq


def inject(profile: np.ndarray, vp: VehicleParams, init: InitState, rng: np.random.Generator,
           anomaly: AnomalySpec, seq_id: str = "") -> tuple[Sequence, GroundTruth]:
    seq = simulate(profile, vp, init, rng, anomaly, seq_id)
    T = seq.T
    if anomaly.onset == "start":
        gt = GroundTruth(TS_ANOMALY, T, 0, T - 1, anomaly.root_cause_channels, anomaly.type)
    else:
        gt = GroundTruth(SUBSEQ_ANOMALY, T, T // 2, T - 1, anomaly.root_cause_channels, anomaly.type)
    return seq, gt


@dataclass
class DatasetConfig:
    """Sizes of a synthetic dataset.

    ``n_train`` normal sequences are split 80/20 into training and validation.
    The test set holds ``anomalies_per_pair`` anomalies for every (type, cycle)
    pair and enough normal runs for ``anomaly_ratio``.
    """

    n_train: int = 200
    budget: int = 1
    cycles: list[str] = field(default_factory=lambda: list(CYCLE_NAMES))
    anomalies_per_pair: int = 1
    anomaly_ratio: float = 0.063
    val_fraction: float = 0.2
    magnitudes: dict[str, float] = field(default_factory=dict)
    midpoint_share: float = 3 / 8  # share of cooling-loss anomalies with a midpoint onset
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def plan_test_anomalies(cfg: DatasetConfig) -> list[tuple[str, AnomalySpec]]:
    specs = []
    n_cooling = 0
    for atype in ANOMALY_TYPES:
        mag = cfg.magnitudes.get(atype)
        for cycle in cfg.cycles:
            for _ in range(cfg.anomalies_per_pair):
                onset = "start"
                if atype == "cooling_loss":
                    # spread midpoint onsets evenly over the cooling-loss runs
                    if int((n_cooling + 1) * cfg.midpoint_share) > int(n_cooling * cfg.midpoint_share):
                        onset = "midpoint"
                    n_cooling += 1
                specs.append((cycle, AnomalySpec(atype, onset, mag)))
    return specs


def _generate_one(seq_id: str, cycle: str, seed_seq: np.random.SeedSequence, vp: VehicleParams,
                  anomaly: AnomalySpec | None):
    """One run of a cycle; redraws the initial state if the battery runs empty."""
    rng = np.random.default_rng(seed_seq)
    spec = standard_cycle(cycle)
    for _ in range(20):
        profile = gen_cycle(spec, rng)
        init = draw_init_state(rng)
        sim_rng = np.random.default_rng(rng.integers(2 ** 63))
        try:
            if anomaly is None:
                seq = simulate(profile, vp, init, sim_rng, seq_id=seq_id)
                return seq, GroundTruth(NORMAL, seq.T), init
            seq, gt = inject(profile, vp, init, sim_rng, anomaly, seq_id)
            return seq, gt, init
        except InfeasibleCycle:
            continue
    raise InfeasibleCycle(f"could not generate a feasible run for {seq_id}")


def build_dataset(out_dir, cfg: DatasetConfig | None = None, vp: VehicleParams | None = None) -> dict:
    """Generate train/val/test splits into ``out_dir`` and return the manifest."""
    cfg = cfg or DatasetConfig()
    vp = vp or VehicleParams()
    out = Path(out_dir)
    root = np.random.SeedSequence(cfg.seed)
    seeds_train, seeds_test = root.spawn(2)

    n_normal = cfg.n_train * cfg.budget
    n_val = int(round(n_normal * cfg.val_fraction))
    n_fit = n_normal - n_val
    anomalies = plan_test_anomalies(cfg)
    n_anom = len(anomalies)
    n_test_normal = int(round(n_anom * (1.0 - cfg.anomaly_ratio) / cfg.anomaly_ratio))

    records = []
    train_children = seeds_train.spawn(n_normal)
    for i, ss in enumerate(train_children):
        cycle = cfg.cycles[i % len(cfg.cycles)]
        split = "train" if i < n_fit else "val"
        sid = f"{split}_{i:05d}"
        seq, gt, init = _generate_one(sid, cycle, ss, vp, None)
        write_sequence(out / split, seq, gt, split, {"cycle": cycle, "init": asdict(init)})
        records.append((split, sid))

    test_children = seeds_test.spawn(n_anom + n_test_normal)
    jobs = [(c, a) for c, a in anomalies] + [(cfg.cycles[i % len(cfg.cycles)], None)
                                             for i in range(n_test_normal)]
    for i, ((cycle, anomaly), ss) in enumerate(zip(jobs, test_children)):
        sid = f"test_{i:05d}"
        seq, gt, init = _generate_one(sid, cycle, ss, vp, anomaly)
        extra = {"cycle": cycle, "init": asdict(init)}
        if anomaly is not None:
            extra["anomaly"] = {"type": anomaly.type, "onset": anomaly.onset, "magnitude": anomaly.magnitude}
        write_sequence(out / "test", seq, gt, "test", extra)
        records.append(("test", sid))

    manifest = {
        "channels": list(CHANNELS),
        "rate": RATE,
        "config": cfg.to_dict(),
        "vehicle": asdict(vp),
        "counts": {
            "train": n_fit,
            "val": n_val,
            "test": n_anom + n_test_normal,
            "test_anomalous": n_anom,
            "test_normal": n_test_normal,
        },
    }
    out.mkdir(parents=True, exist_ok=True)
    (out / "dataset.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def paired_runs(cycle: str, anomaly: AnomalySpec, seed: int = 0, vp: VehicleParams | None = None):
    """A normal run and the injected run sharing profile, initial state and noise."""
    vp = vp or VehicleParams()
    rng = np.random.default_rng(seed)
    profile = gen_cycle(standard_cycle(cycle), rng)
    init = draw_init_state(rng)
    noise_seed = int(rng.integers(2 ** 63))
    normal = simulate(profile, vp, init, np.random.default_rng(noise_seed))
    injected, gt = inject(profile, vp, init, np.random.default_rng(noise_seed), anomaly)
    return normal, injected, gt

