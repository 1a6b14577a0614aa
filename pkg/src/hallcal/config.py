"""Experiment configuration: parsing, validation, presets and seed derivation.

A configuration is one JSON or YAML document. Every section is optional and
falls back to the defaults of the simulation study (4 kHz sampling, 11
pole pairs, harmonics 1 to 11, 13 rad ramp). Unknown keys are rejected with
their full key path.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .flux_model import BasisDescriptor, BasisError, FluxModel, NoiseModel, make_ground_truth
from .identification import SemSettings
from .lti import (
    ContinuousTransferFunction,
    DiscreteTransferFunction,
    ModelError,
    model_from_dict,
)
from .simulation import Multisine, Ramp, SimulationConfig


class ConfigError(ValueError):
    pass


# Seed purposes, mixed with the master seed through numpy's SeedSequence.
SEED_TRUTH = 0
SEED_RAMP_NOISE = 1
SEED_VALIDATION_NOISE = 2
SEED_MULTISINE_PHASE = 10
SEED_MULTISINE_NOISE = 11

PLANT = {"kind": "continuous_tf", "num": [1.663e5], "den": [1.0, 632.6, 2702.0, 0.0],
         "delay": 1.2e-4}
CONTROLLER = {"kind": "discrete_tf", "num": [2.94, -3.29, -2.10, 2.45],
              "den": [1.0, -3.45, 4.52, -2.68, 0.61]}

DEFAULTS = {
    "seed": 0,
    "sample_rate": 4000.0,
    "n_m": 11,
    "plant": PLANT,
    "controller": CONTROLLER,
    "truth": {
        "basis": {"variant": "fourier", "harmonics": list(range(1, 12))},
        "perturbation": 0.05,
        "amplitude": 1.0,
        "sub_harmonic_weight": 0.1,
    },
    "noise": {"variance": 7.5e-6},
    "disturbance": 0.0,
    "ramp": {"start": 0.0, "end": 13.0, "duration": 26.0},
    "multisine": {"f_min": 0.5, "f_max": 200.0, "f_step": 0.5, "amplitude": 1.4e-3,
                  "periods": 4, "realizations": 4},
    "bla": {"na": 2, "nb": 4, "nk": 1, "integrator": True, "transient_periods": 1},
    "calibration": {
        "basis": {"variant": "fourier", "harmonics": list(range(1, 12))},
        "lut_size": 2048,
        "scale_mode": "replay",
        "max_iterations": 30,
        "tolerance": 1e-9,
        "fd_step": 1e-6,
        "learn_hyperparameters": True,
        "noise_significance": 3.84,
    },
    "validation": {"psd_points": 65536},
    "bounds": {"y0": 1e3, "torque": 1e3},
}

# Quick variant for interactive use and CI: same loop, half-length ramp.
DESK_SCALE = {"ramp": {"start": 0.0, "end": 13.0, "duration": 13.0}}
FULL_SCALE: dict = {}

# Sections whose values are free-form documents validated elsewhere.
_OPAQUE = {("plant",), ("controller",), ("truth", "basis"), ("calibration", "basis")}


def merge(base: dict, override: dict, path=()) -> dict:
    """Recursive merge of ``override`` into ``base``; unknown keys raise."""
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = path + (key,)
        if key not in base:
            raise ConfigError(f"unknown configuration key '{'.'.join(where)}'")
        if isinstance(base[key], dict) and where not in _OPAQUE:
            if not isinstance(value, dict):
                raise ConfigError(f"'{'.'.join(where)}' must be a mapping")
            out[key] = merge(base[key], value, where)
        else:
            out[key] = copy.deepcopy(value)
    return out


def derive_seed(master: int, purpose: int, index: int = 0) -> int:
    return int(np.random.SeedSequence([int(master), purpose, index]).generate_state(1)[0])


def load_document(path) -> dict:
    """Read a JSON or YAML document; parse errors carry the line number."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if path.suffix.lower() in (".yaml", ".yml"):
        import yaml
        try:
            doc = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            where = f" at line {mark.line + 1}" if mark is not None else ""
            raise ConfigError(f"{path}: YAML parse error{where}: {exc}") from None
    else:
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: JSON parse error at line {exc.lineno}, "
                              f"column {exc.colno}: {exc.msg}") from None
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return doc


@dataclass(frozen=True)
class CalibrationConfig:
    """Validated experiment settings; ``raw`` is the fully merged document."""

    raw: dict

    @classmethod
    def from_dict(cls, doc: dict | None = None, *, preset: dict | None = None,
                  seed: int | None = None) -> "CalibrationConfig":
        merged = merge(DEFAULTS, preset or {})
        merged = merge(merged, doc or {})
        if seed is not None:
            merged["seed"] = int(seed)
        cfg = cls(merged)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path=None, *, preset: dict | None = None, seed: int | None = None):
        doc = load_document(path) if path is not None else {}
        return cls.from_dict(doc, preset=preset, seed=seed)

    # -- accessors ------------------------------------------------------------
    def __getitem__(self, key):
        return self.raw[key]

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def sample_rate(self) -> float:
        return float(self.raw["sample_rate"])

    @property
    def sample_time(self) -> float:
        return 1.0 / self.sample_rate

    @property
    def n_m(self) -> int:
        return int(self.raw["n_m"])

    @property
    def fingerprint(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def plant(self) -> ContinuousTransferFunction:
        return self._model("plant", ContinuousTransferFunction)

    def controller(self) -> DiscreteTransferFunction:
        doc = dict(self.raw["controller"])
        doc.setdefault("Ts", self.sample_time)
        try:
            model = model_from_dict(doc)
        except (ModelError, KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"controller: {exc}") from None
        if not isinstance(model, DiscreteTransferFunction):
            raise ConfigError("controller must be a discrete_tf")
        if abs(model.sample_time * self.sample_rate - 1) > 1e-9:
            raise ConfigError(f"controller Ts={model.sample_time} does not match "
                              f"sample_rate={self.sample_rate}")
        return model

    def _model(self, key, kind):
        try:
            model = model_from_dict(self.raw[key])
        except (ModelError, KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"{key}: {exc}") from None
        if not isinstance(model, kind):
            raise ConfigError(f"{key} must be of kind {kind.__name__}")
        return model

    def truth_basis(self) -> BasisDescriptor:
        return self._basis(("truth", "basis"))

    def calibration_basis(self) -> BasisDescriptor:
        return self._basis(("calibration", "basis"))

    def _basis(self, path) -> BasisDescriptor:
        doc = self.raw[path[0]][path[1]]
        try:
            return BasisDescriptor.from_dict(doc)
        except (BasisError, TypeError) as exc:
            raise ConfigError(f"{'.'.join(path)}: {exc}") from None

    def flux_truth(self) -> FluxModel:
        t = self.raw["truth"]
        return make_ground_truth(self.truth_basis(), self.n_m, float(t["perturbation"]),
                                 derive_seed(self.seed, SEED_TRUTH),
                                 float(t["amplitude"]), float(t["sub_harmonic_weight"]))

    def ramp(self) -> Ramp:
        r = self.raw["ramp"]
        return Ramp(float(r["start"]), float(r["end"]), float(r["duration"]), self.sample_rate)

    def multisine_frequencies(self) -> np.ndarray:
        m = self.raw["multisine"]
        step = float(m["f_step"])
        k0 = int(round(float(m["f_min"]) / step))
        k1 = int(round(float(m["f_max"]) / step))
        return step * np.arange(max(k0, 1), k1 + 1)

    def multisine(self, realization: int) -> Multisine:
        m = self.raw["multisine"]
        return Multisine(tuple(self.multisine_frequencies()), float(m["amplitude"]),
                         derive_seed(self.seed, SEED_MULTISINE_PHASE, realization),
                         int(m["periods"]), self.sample_rate)

    def noise(self, purpose: int, index: int = 0) -> NoiseModel:
        return NoiseModel(float(self.raw["noise"]["variance"]),
                          derive_seed(self.seed, purpose, index))

    def simulation(self, reference, noise: NoiseModel) -> SimulationConfig:
        b = self.raw["bounds"]
        return SimulationConfig(self.plant(), self.controller(), self.flux_truth(), noise,
                                reference, float(self.raw["disturbance"]),
                                float(b["y0"]), float(b["torque"]))

    def ramp_simulation(self, validation: bool = False) -> SimulationConfig:
        purpose = SEED_VALIDATION_NOISE if validation else SEED_RAMP_NOISE
        return self.simulation(self.ramp(), self.noise(purpose))

    def multisine_simulation(self, realization: int) -> SimulationConfig:
        return self.simulation(self.multisine(realization),
                               self.noise(SEED_MULTISINE_NOISE, realization))

    def sem_settings(self) -> SemSettings:
        c = self.raw["calibration"]
        return SemSettings(max_iterations=int(c["max_iterations"]),
                           tolerance=float(c["tolerance"]), fd_step=float(c["fd_step"]),
                           learn_hyperparameters=bool(c["learn_hyperparameters"]),
                           noise_significance=float(c["noise_significance"]))

    def bla_options(self) -> dict:
        b = self.raw["bla"]
        return {"na": int(b["na"]), "nb": int(b["nb"]), "nk": int(b["nk"]),
                "integrator": bool(b["integrator"]),
                "transient_periods": int(b["transient_periods"])}

    # -- validation -------------------------------------------------------------
    def validate(self):
        """Build every derived object once so errors surface at load time."""
        try:
            if not self.sample_rate > 0:
                raise ConfigError("sample_rate must be > 0")
            if self.n_m < 1:
                raise ConfigError("n_m must be a positive integer")
            self.plant()
            self.controller()
            self.flux_truth()
            self.calibration_basis()
            self.ramp()
            m = self.raw["multisine"]
            if int(m["realizations"]) < 2:
                raise ConfigError("multisine.realizations must be >= 2")
            if float(m["f_step"]) <= 0 or self.multisine_frequencies().size == 0:
                raise ConfigError("multisine frequency grid is empty")
            self.multisine(0)
            self.noise(SEED_RAMP_NOISE)
            self.sem_settings()
            if int(self.raw["calibration"]["lut_size"]) < 2:
                raise ConfigError("calibration.lut_size must be >= 2")
            if self.raw["calibration"]["scale_mode"] not in ("replay", "closed_loop"):
                raise ConfigError("calibration.scale_mode must be 'replay' or 'closed_loop'")
        except ConfigError:
            raise
        except (ValueError, TypeError, KeyError) as exc:
            raise ConfigError(str(exc)) from None
