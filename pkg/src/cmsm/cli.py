"""Command-line pipeline: simulate datasets, train, reconstruct with the
zero-filled / TV / diffusion-sampler trio, and aggregate metric tables.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure.  All artifacts are written atomically.
"""

from __future__ import annotations

import argparse
import csv
import io
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import baselines, fileio, nets, phantom, sampling, training
from .baselines import METRIC_CSV_HEADER, MetricReport, TVDivergenceError
from .config import ConfigError, RunConfig, describe_keys, load_config
from .ops import ComplexImage
from .training import NonFiniteLossError, TrainingSample

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

METHOD_ORDER = ["Input", "TV", "C-MSM"]


def write_pgm(path: str, magnitude: np.ndarray) -> None:
    """16-bit binary PGM, magnitudes scaled linearly to the per-image max."""
    mag = np.abs(np.asarray(magnitude)).astype(np.float64)
    peak = mag.max()
    scaled = np.zeros_like(mag) if peak <= 0 else mag / peak
    pixels = np.round(scaled * 65535).astype(">u2")
    header = f"P5\n{mag.shape[1]} {mag.shape[0]}\n65535\n".encode("ascii")
    fileio.atomic_write_bytes(path, header + pixels.tobytes())


def _write_csv(path: str, header: list[str], rows: list[list[str]]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    fileio.atomic_write_text(path, buf.getvalue())


def _worker_count(n_tasks: int) -> int:
    cap = os.environ.get("CMSM_THREADS", "")
    try:
        limit = int(cap) if cap else (os.cpu_count() or 1)
    except ValueError:
        limit = os.cpu_count() or 1
    return max(1, min(limit, n_tasks))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_simulate(cfg: RunConfig, seed: int, out_dir: str) -> int:
    if cfg["sim.train_records"] < 1 or cfg["sim.test_records"] < 1:
        raise ConfigError("sim.train_records and sim.test_records must be >= 1")
    spec = cfg.phantom_spec()
    n_train, n_test = cfg["sim.train_records"], cfg["sim.test_records"]
    common = dict(
        spec=spec,
        n_coils=cfg["sim.coils"],
        noise_level=cfg["sim.noise"],
        acceleration=cfg["sim.acceleration"],
        acs_width=cfg["sim.acs_width"],
        seed=seed,
    )
    train_records = phantom.simulate_records(count=n_train, first_index=0, **common)
    test_records = phantom.simulate_records(
        count=n_test, first_index=n_train, **common
    )
    os.makedirs(out_dir, exist_ok=True)
    train_path = os.path.join(out_dir, "train.cmsd")
    test_path = os.path.join(out_dir, "test.cmsd")
    phantom.save_dataset(train_records, train_path)
    phantom.save_dataset(test_records, test_path)
    print(
        f"simulated {n_train} train + {n_test} test records: "
        f"{spec.height}x{spec.width}, {cfg['sim.coils']} coils, "
        f"R={cfg['sim.acceleration']:g}, acs={cfg['sim.acs_width']}, "
        f"noise={cfg['sim.noise']:g}"
    )
    print(f"wrote {train_path} and {test_path}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, seed: int, out_path: str, resume: str | None) -> int:
    records = phantom.load_dataset(cfg["train.dataset"])
    views = [TrainingSample.from_record(r) for r in records]
    train_cfg = cfg.train_config(seed)

    theta = phi = None
    start_iteration = 0
    if resume is not None:
        theta, phi, extras = nets.stores_from_checkpoint(nets.load_checkpoint(resume))
        start_iteration = int(extras.get("train.iteration", 0))

    acs_width = records[0].sample.mask.acs_width

    def extras_at(iteration: int) -> dict[str, float]:
        return {
            "schedule.sigma_min": train_cfg.schedule.sigma_min,
            "schedule.sigma_max": train_cfg.schedule.sigma_max,
            "schedule.steps": train_cfg.schedule.steps,
            "train.iteration": iteration,
            "train.acceleration": train_cfg.mask_acceleration,
            "train.acs_width": acs_width,
        }

    def write_ckpt(iteration: int, th: nets.ParamStore, ph: nets.ParamStore) -> None:
        nets.save_checkpoint(
            out_path, nets.checkpoint_tensors(th, ph, extras_at(iteration))
        )

    theta, phi, log = training.train(
        views,
        train_cfg,
        theta=theta,
        phi=phi,
        start_iteration=start_iteration,
        net_width=cfg["train.width"],
        checkpoint_cb=write_ckpt,
        checkpoint_every=cfg["train.checkpoint_every"],
    )
    end_iteration = start_iteration + train_cfg.iterations
    write_ckpt(end_iteration, theta, phi)
    _write_csv(
        cfg["train.log"],
        ["iteration", "msm_loss", "csm_loss", "total_loss", "sigma"],
        [
            [str(r.iteration), f"{r.msm_loss:.8g}", f"{r.csm_loss:.8g}",
             f"{r.total_loss:.8g}", f"{r.sigma:.8g}"]
            for r in log
        ],
    )
    print(
        f"trained {train_cfg.iterations} iterations "
        f"(start {start_iteration}, final loss {log[-1].total_loss:.5g}); "
        f"checkpoint {out_path}, log {cfg['train.log']}"
    )
    return EXIT_OK


def _reconstruct_one(index, record, cfg, seed, theta, phi, schedule, out_dir):
    y = record.sample
    record_seed = seed + index
    sampler_cfg = cfg.sampler_config(record_seed)
    maps = sampling.estimate_csm_inference(_acs_view(y), phi)
    zf = baselines.zero_filled(y, maps)
    tv = baselines.tv_reconstruct(
        y,
        maps,
        cfg["sample.tv_weight"],
        iterations=cfg["sample.tv_iterations"],
        step=cfg["sample.tv_step"],
    )
    cm = sampling.reconstruct(y, theta, phi, sampler_cfg, schedule)
    truth = record.ground_truth
    rows = []
    for method, image in (("Input", zf), ("TV", tv), ("C-MSM", cm)):
        rows.append(
            MetricReport(
                method=method,
                acceleration=cfg["sim.acceleration"],
                seed=record_seed,
                psnr_db=baselines.psnr(truth, image),
                ssim=baselines.ssim(truth, image),
            )
        )
    tag = f"rec_{index:03d}"
    write_pgm(os.path.join(out_dir, f"{tag}_truth.pgm"), np.abs(truth.data))
    write_pgm(os.path.join(out_dir, f"{tag}_input.pgm"), np.abs(zf.data))
    write_pgm(os.path.join(out_dir, f"{tag}_tv.pgm"), np.abs(tv.data))
    write_pgm(os.path.join(out_dir, f"{tag}_cmsm.pgm"), np.abs(cm.data))
    return rows


def _acs_view(y):
    from .ops import acs_mask, restrict

    return restrict(y, acs_mask(y.height, y.width, y.mask.acs_width))


def cmd_reconstruct(cfg: RunConfig, seed: int, out_dir: str) -> int:
    records = phantom.load_dataset(cfg["sample.dataset"])
    theta, phi, extras = nets.stores_from_checkpoint(
        nets.load_checkpoint(cfg["sample.checkpoint"])
    )
    schedule = cfg.schedule()
    os.makedirs(out_dir, exist_ok=True)

    # unless explicitly overridden, ensemble masks follow the law the
    # checkpoint was trained with
    acceleration = cfg["sample.acceleration"]
    acs_width = cfg["sample.acs_width"]
    if not cfg.was_set("sample.acceleration") and "train.acceleration" in extras:
        acceleration = float(extras["train.acceleration"])
    if not cfg.was_set("sample.acs_width") and "train.acs_width" in extras:
        acs_width = int(extras["train.acs_width"])
    cfg.values["sample.acceleration"] = acceleration
    cfg.values["sample.acs_width"] = acs_width

    workers = _worker_count(len(records))
    tasks = list(enumerate(records))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(
                pool.map(
                    lambda item: _reconstruct_one(
                        item[0], item[1], cfg, seed, theta, phi, schedule, out_dir
                    ),
                    tasks,
                )
            )
    else:
        results = [
            _reconstruct_one(i, rec, cfg, seed, theta, phi, schedule, out_dir)
            for i, rec in tasks
        ]
    reports = [report for rows in results for report in rows]
    metrics_path = os.path.join(out_dir, "metrics.csv")
    _write_csv(metrics_path, METRIC_CSV_HEADER, [r.to_row() for r in reports])
    by_method = {}
    for r in reports:
        by_method.setdefault(r.method, []).append(r.psnr_db)
    summary = ", ".join(
        f"{m}={np.mean(v):.2f}dB" for m, v in sorted(by_method.items())
    )
    print(f"reconstructed {len(records)} records into {out_dir} ({summary})")
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig, out_path: str) -> int:
    paths = [p.strip() for p in cfg["eval.inputs"].split(",") if p.strip()]
    if not paths:
        raise ConfigError("eval.inputs lists no CSV files")
    reports: list[MetricReport] = []
    for path in paths:
        with open(path, "r", encoding="utf-8", newline="") as handle:
            reader = csv.reader(handle)
            header = next(reader, None)
            if header != METRIC_CSV_HEADER:
                raise fileio.FileFormatError(f"{path}: unexpected CSV header")
            for row in reader:
                reports.append(MetricReport.from_row(row))
    if not reports:
        raise fileio.FileFormatError("no metric rows found")

    groups: dict[tuple[str, float], list[MetricReport]] = {}
    for r in reports:
        groups.setdefault((r.method, r.acceleration), []).append(r)

    def method_rank(method: str) -> tuple[int, str]:
        if method in METHOD_ORDER:
            return (METHOD_ORDER.index(method), "")
        return (len(METHOD_ORDER), method)

    keys = sorted(groups, key=lambda k: (k[1], method_rank(k[0])))
    rows = []
    print(f"{'method':<8} {'R':>4} {'n':>4} {'psnr_db':>16} {'ssim':>16}")
    for key in keys:
        method, acc = key
        vals = groups[key]
        finite = [v.psnr_db for v in vals if math.isfinite(v.psnr_db)]
        p = finite if finite else [math.inf]
        p_mean, p_std = float(np.mean(p)), float(np.std(p))
        s = [v.ssim for v in vals]
        s_mean, s_std = float(np.mean(s)), float(np.std(s))
        print(
            f"{method:<8} {acc:>4g} {len(vals):>4} "
            f"{p_mean:>8.3f} ± {p_std:<5.3f} {s_mean:>8.4f} ± {s_std:<6.4f}"
        )
        rows.append(
            [method, f"{acc:g}", str(len(vals)), f"{p_mean:.6f}", f"{p_std:.6f}",
             f"{s_mean:.6f}", f"{s_std:.6f}"]
        )
    _write_csv(
        out_path,
        ["method", "acceleration", "n", "psnr_mean", "psnr_std", "ssim_mean", "ssim_std"],
        rows,
    )
    print(f"wrote {out_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing and dispatch
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cmsm",
        description=(
            "Self-supervised diffusion reconstruction pipeline for simulated "
            "parallel MRI: simulate, train, reconstruct, evaluate."
        ),
        epilog=describe_keys(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("simulate", "generate the synthetic train/test datasets"),
        ("train", "train the denoiser and coil-map predictor"),
        ("reconstruct", "run the baselines and the sampler on the test set"),
        ("evaluate", "aggregate metric CSVs into a comparison table"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="path to the key = value config file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="override the command output path")
        if name == "train":
            p.add_argument("--resume", default=None, help="checkpoint to continue from")
    return parser


def _require_file(path: str) -> None:
    if not os.path.isfile(path):
        raise FileNotFoundError(f"missing input file: {path}")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        seed = args.seed if args.seed is not None else cfg["seed"]
        if args.command == "simulate":
            out_dir = args.out or cfg["sim.out_dir"]
            return cmd_simulate(cfg, seed, out_dir)
        if args.command == "train":
            _require_file(cfg["train.dataset"])
            if args.resume is not None:
                _require_file(args.resume)
            out_path = args.out or cfg["train.checkpoint"]
            return cmd_train(cfg, seed, out_path, args.resume)
        if args.command == "reconstruct":
            _require_file(cfg["sample.dataset"])
            _require_file(cfg["sample.checkpoint"])
            out_dir = args.out or cfg["sample.out_dir"]
            return cmd_reconstruct(cfg, seed, out_dir)
        if args.command == "evaluate":
            for path in cfg["eval.inputs"].split(","):
                if path.strip():
                    _require_file(path.strip())
            out_path = args.out or cfg["eval.out"]
            return cmd_evaluate(cfg, out_path)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (fileio.FileFormatError, FileNotFoundError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteLossError, TVDivergenceError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def console_main() -> None:
    sys.exit(main())


if __name__ == "__main__":
    console_main()
