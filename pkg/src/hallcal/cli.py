"""Command-line entry point.

Verbs: ``simulate``, ``identify-bla``, ``calibrate``, ``validate`` and
``replicate-paper-sim``. Every command writes its outputs plus one
``manifest.json`` into ``--out``. Figures are emitted as CSV data only.

Exit codes: 0 success, 2 configuration or input error, 3 numerical
failure, 4 non-bijective correction table.
"""

from __future__ import annotations

import argparse
import datetime
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import DESK_SCALE, FULL_SCALE, CalibrationConfig, ConfigError
from .flux_model import FluxModel
from .identification import (
    BlaEstimate,
    CalibrationResult,
    IdentificationError,
    calibrate,
    estimate_bla,
    run_bla_experiments,
)
from .lti import ModelError, model_from_dict, model_to_dict, tf_to_ss
from .metrics import (
    compute_cumulative_psd,
    error_metrics,
    monotone_segment,
    noise_floor,
    rms,
)
from .reconstruction import (
    BijectivityError,
    CorrectionTable,
    DegenerateInputError,
    reconstruct_sequence,
)
from .simulation import Dataset, SimulationDivergence, load_dataset, save_dataset, simulate_truth, write_csv

log = logging.getLogger("hallcal")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_BIJECTIVITY = 4

FLUX_GRID = 4096


class InputError(ValueError):
    pass


@dataclass
class RunManifest:
    command: str
    config_fingerprint: str | None
    seeds: dict
    version: str
    started: str
    finished: str = ""
    outputs: list = field(default_factory=list)
    arguments: dict = field(default_factory=dict)
    config: dict | None = None

    def write(self, out_dir: Path):
        self.finished = _now()
        path = out_dir / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")


def _write_json(path: Path, doc) -> Path:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


# -- persistence helpers ------------------------------------------------------------

def save_bla(bla: BlaEstimate, out: Path) -> list:
    p1 = _write_json(out / "bla.json", bla.to_dict())
    model_resp = bla.model.freqresp(bla.frequencies)
    table = np.column_stack([bla.frequencies, bla.frf.real, bla.frf.imag, bla.frf_variance,
                             model_resp.real, model_resp.imag])
    p2 = out / "frf.csv"
    write_csv(p2, ["f", "frf_re", "frf_im", "frf_var", "model_re", "model_im"], table)
    return [p1, p2]


def load_bla(path) -> BlaEstimate:
    try:
        doc = json.loads(Path(path).read_text())
        extra = set(doc) - {"transfer_function", "scale_corrected", "scale"}
        if extra:
            raise InputError(f"{path}: unknown keys {sorted(extra)}")
        tf = model_from_dict(doc["transfer_function"])
    except (OSError, json.JSONDecodeError, KeyError, ModelError) as exc:
        raise InputError(f"cannot load BLA from {path}: {exc}") from None
    empty = np.zeros(0)
    return BlaEstimate(tf_to_ss(tf), tf, empty, empty.astype(complex), empty,
                       bool(doc.get("scale_corrected", False)), float(doc.get("scale", 1.0)))


def save_result(result: CalibrationResult, out: Path) -> list:
    paths = [_write_json(out / "calibration.json", result.to_dict())]
    p = out / "table.bin"
    p.write_bytes(result.table.to_bytes())
    paths.append(p)
    paths.append(_write_json(out / "table.json", result.table.to_dict()))
    p = out / "j_trace.csv"
    trace = np.column_stack([np.arange(len(result.cost_trace)), result.cost_trace])
    write_csv(p, ["iteration", "J"], trace)
    paths.append(p)
    grid = 2 * np.pi * np.arange(FLUX_GRID) / FLUX_GRID
    p = out / "flux_model.csv"
    write_csv(p, ["y0", "g1", "g2", "g3"], np.column_stack([grid, result.flux_model(grid)]))
    paths.append(p)
    return paths


def load_table(path) -> CorrectionTable:
    path = Path(path)
    try:
        if path.suffix == ".json":
            return CorrectionTable.from_dict(json.loads(path.read_text()))
        return CorrectionTable.from_bytes(path.read_bytes())
    except (OSError, ValueError, KeyError) as exc:
        raise InputError(f"cannot load correction table from {path}: {exc}") from None


def _load_dataset(path) -> Dataset:
    try:
        return load_dataset(path)
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot load dataset {path}: {exc}") from None


# -- commands -------------------------------------------------------------------------

def _config(args) -> CalibrationConfig:
    preset = DESK_SCALE if args.desk_scale else FULL_SCALE
    return CalibrationConfig.load(args.config, preset=preset, seed=args.seed)


def _validate_outputs(ds: Dataset, table: CorrectionTable, n_m: int, out: Path,
                      psd_points: int, truth: FluxModel | None = None) -> tuple:
    if ds.y0 is None:
        raise InputError("dataset has no y0 column; validation needs the hidden true "
                         "angle, which only simulated datasets carry")
    y_init = reconstruct_sequence(ds.d, n_m)
    y_star = reconstruct_sequence(ds.d, n_m, table)
    seg = monotone_segment(ds.y0)
    if seg.stop - seg.start < 2:
        raise InputError("true angle is not increasing; cannot form a spatial spectrum")
    m = error_metrics(ds.y0[seg], y_init[seg], y_star[seg], ds.y0[seg], psd_points)
    doc = m.to_dict()
    doc["samples"] = int(seg.stop - seg.start)
    doc["first_sample"] = int(seg.start)
    if truth is not None:
        nf = noise_floor(truth, ds.d, ds.y0)
        doc["noise_floor_rms"] = rms(nf[seg])
    paths = [_write_json(out / "metrics.json", doc)]
    p = out / "error_vs_y0.csv"
    write_csv(p, ["y0", "error_init", "error_star"],
              np.column_stack([ds.y0, y_init - ds.y0, y_star - ds.y0]))
    paths.append(p)
    p = out / "cumulative_psd.csv"
    write_csv(p, ["cycles_per_rev", "cumulative_init", "cumulative_star"],
              np.column_stack([m.psd_init.frequency, m.psd_init.cumulative,
                               m.psd_star.cumulative]))
    paths.append(p)
    return doc, paths


def cmd_simulate(args, out: Path, manifest: RunManifest):
    cfg = _config(args)
    manifest.config_fingerprint = cfg.fingerprint
    manifest.config = cfg.raw
    manifest.seeds = {"master": cfg.seed}
    ds = simulate_truth(cfg.ramp_simulation(validation=args.validation))
    ds.meta["config_fingerprint"] = cfg.fingerprint
    path = save_dataset(ds, out / "dataset.csv")
    manifest.outputs += [str(path), str(path.with_name("dataset.meta.json"))]


def cmd_identify_bla(args, out: Path, manifest: RunManifest):
    cfg = _config(args)
    manifest.config_fingerprint = cfg.fingerprint
    manifest.config = cfg.raw
    manifest.seeds = {"master": cfg.seed}
    exps = run_bla_experiments(cfg.multisine_simulation,
                               int(cfg["multisine"]["realizations"]))
    bla = estimate_bla(exps, **cfg.bla_options())
    manifest.outputs += [str(p) for p in save_bla(bla, out)]


def cmd_calibrate(args, out: Path, manifest: RunManifest):
    cfg = _config(args)
    manifest.config_fingerprint = cfg.fingerprint
    manifest.config = cfg.raw
    manifest.seeds = {"master": cfg.seed}
    ds = _load_dataset(args.dataset).without_truth()
    bla = load_bla(args.bla)
    if abs(ds.sample_time - bla.model.sample_time) > 1e-9 * bla.model.sample_time:
        raise InputError(f"dataset sample time {ds.sample_time} differs from BLA sample "
                         f"time {bla.model.sample_time}")
    c = cfg["calibration"]
    result = calibrate(ds, bla, tf_to_ss(cfg.controller()), cfg.calibration_basis(), cfg.n_m,
                       lut_size=int(c["lut_size"]), settings=cfg.sem_settings(),
                       scale_mode=c["scale_mode"], estimate_c=not bla.scale_corrected)
    manifest.outputs += [str(p) for p in save_result(result, out)]


def cmd_validate(args, out: Path, manifest: RunManifest):
    ds = _load_dataset(args.dataset)
    table = load_table(args.table)
    n_m = args.n_m if args.n_m is not None else int(ds.meta.get("n_m", 0))
    if n_m < 1:
        raise InputError("pole-pair count unknown: pass --n-m or keep the dataset metadata")
    _, paths = _validate_outputs(ds, table, n_m, out, args.psd_points)
    manifest.outputs += [str(p) for p in paths]


def cmd_replicate(args, out: Path, manifest: RunManifest):
    cfg = _config(args)
    manifest.config_fingerprint = cfg.fingerprint
    manifest.config = cfg.raw
    manifest.seeds = {"master": cfg.seed}
    log.info("BLA experiments")
    exps = run_bla_experiments(cfg.multisine_simulation, int(cfg["multisine"]["realizations"]))
    bla = estimate_bla(exps, **cfg.bla_options())
    manifest.outputs += [str(p) for p in save_bla(bla, out)]
    log.info("ramp experiment")
    ds = simulate_truth(cfg.ramp_simulation())
    manifest.outputs.append(str(save_dataset(ds, out / "dataset.csv")))
    c = cfg["calibration"]
    result = calibrate(ds.without_truth(), bla, tf_to_ss(cfg.controller()),
                       cfg.calibration_basis(), cfg.n_m, lut_size=int(c["lut_size"]),
                       settings=cfg.sem_settings(), scale_mode=c["scale_mode"])
    manifest.outputs += [str(p) for p in save_result(result, out)]
    log.info("validation experiment")
    val = simulate_truth(cfg.ramp_simulation(validation=True))
    manifest.outputs.append(str(save_dataset(val, out / "validation.csv")))
    truth = cfg.flux_truth()
    doc, paths = _validate_outputs(val, result.table, cfg.n_m, out,
                                   int(cfg["validation"]["psd_points"]), truth)
    manifest.outputs += [str(p) for p in paths]
    grid = 2 * np.pi * np.arange(FLUX_GRID) / FLUX_GRID
    p = out / "flux_fit.csv"
    write_csv(p, ["y0", "g1", "g2", "g3", "g1_hat", "g2_hat", "g3_hat"],
              np.column_stack([grid, truth(grid), result.flux_model(grid)]))
    manifest.outputs.append(str(p))
    print(f"f_init rms {doc['rms_init']:.4g} rad, f_star rms {doc['rms_star']:.4g} rad, "
          f"noise floor {doc['noise_floor_rms']:.4g} rad, "
          f"improvement {doc['improvement_factor_rms']:.3g}x")


COMMANDS = {
    "simulate": cmd_simulate,
    "identify-bla": cmd_identify_bla,
    "calibrate": cmd_calibrate,
    "validate": cmd_validate,
    "replicate-paper-sim": cmd_replicate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hallcal", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="JSON or YAML configuration document")
            p.add_argument("--seed", type=int, help="master seed (overrides the config)")
            scale = p.add_mutually_exclusive_group()
            scale.add_argument("--desk-scale", action="store_true",
                               help="shortened ramp for quick runs")
            scale.add_argument("--full-scale", action="store_true",
                               help="full simulation-study settings (default)")
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("simulate", help="simulate a ramp experiment with f_init in the loop")
    common(p)
    p.add_argument("--validation", action="store_true",
                   help="use the validation noise stream instead of the calibration one")
    p = sub.add_parser("identify-bla", help="multisine experiments and BLA fit")
    common(p)
    p = sub.add_parser("calibrate", help="fit the flux model and build the correction table")
    common(p)
    p.add_argument("--dataset", required=True, help="ramp dataset CSV")
    p.add_argument("--bla", required=True, help="bla.json from identify-bla")
    p = sub.add_parser("validate", help="error metrics against the hidden true angle")
    common(p, config=False)
    p.add_argument("--dataset", required=True, help="dataset CSV with a y0 column")
    p.add_argument("--table", required=True, help="table.bin or table.json")
    p.add_argument("--n-m", type=int, help="pole-pair count (default: dataset metadata)")
    p.add_argument("--psd-points", type=int, default=2 ** 16,
                   help="uniform position samples for the spectrum")
    p = sub.add_parser("replicate-paper-sim",
                       help="full simulation study: BLA, calibration and validation")
    common(p)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    arguments = {k: v for k, v in vars(args).items() if k != "verbose"}
    manifest = RunManifest(args.command, None, {}, __version__, _now(), arguments=arguments)
    try:
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](args, out, manifest)
    except (ConfigError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BijectivityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BIJECTIVITY
    except (SimulationDivergence, IdentificationError, DegenerateInputError,
            np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    manifest.write(out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
