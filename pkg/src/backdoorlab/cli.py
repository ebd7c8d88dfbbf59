"""Command-line entry point: generate, poison, train, eval, sweep, verify-theory, bench.

Configuration is one JSON document. Precedence, lowest first: built-in
defaults, ``--preset``, the ``--config`` file, individual flags, then the
seed from ``BACKDOORLAB_SEED`` and finally ``--seed``. The effective config is
written next to every output as ``config.json``.

Exit codes: 0 success, 1 verification or evaluation failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence


from . import experiments as ex
from . import theory
from .detector import (TrainingDiverged, benchmark_penalty_overhead, build_training_set, load_checkpoint,
                       penalty_scaling, save_checkpoint, train)
from .metrics import write_detection_dump, write_results_csv
from .poisoning import load_manifest, save_manifest

log = logging.getLogger("backdoorlab")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2
SEED_ENV = "BACKDOORLAB_SEED"

# section that a --config file must provide for each command: every data-driven command
# has to say which dataset it runs on
REQUIRED_SECTION = {name: "dataset" for name in ("generate", "poison", "train", "eval", "sweep", "bench")}


class UsageError(Exception):
    pass


# --------------------------------------------------------------------- config


def _flag_overrides(args) -> dict:
    doc: dict = {}

    def put(section, key, value):
        if value is not None:
            doc.setdefault(section, {})[key] = value

    put("training", "tau", getattr(args, "tau", None))
    put("training", "rho", getattr(args, "rho", None))
    put("training", "lambda", getattr(args, "lam", None))
    put("training", "loss", getattr(args, "loss", None))
    put("training", "head", getattr(args, "head", None))
    put("training", "epochs", getattr(args, "epochs", None))
    put("attack", "ratio", getattr(args, "ratio", None))
    put("attack", "placement", getattr(args, "placement", None))
    put("attack", "strategy", getattr(args, "strategy", None))
    put("attack", "target", getattr(args, "target", None))
    return doc


def effective_config(args, command: str) -> ex.ExperimentConfig:
    doc: dict = {}
    if args.preset:
        doc = ex.merge_docs(doc, ex.PRESETS[args.preset])
    if args.config:
        try:
            file_doc = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise ex.ConfigError(f"cannot read config {args.config}: {exc.strerror}") from exc
        except json.JSONDecodeError as exc:
            raise ex.ConfigError(f"config {args.config} is not valid JSON: {exc}") from exc
        if not isinstance(file_doc, dict):
            raise ex.ConfigError("config must be a JSON object")
        need = REQUIRED_SECTION.get(command)
        if need and need not in file_doc:
            raise ex.ConfigError(f"config is missing section(s): {need}")
        doc = ex.merge_docs(doc, file_doc)
    doc = ex.merge_docs(doc, _flag_overrides(args))
    env_seed = os.environ.get(SEED_ENV)
    if env_seed is not None:
        try:
            doc["seed"] = int(env_seed)
        except ValueError as exc:
            raise ex.ConfigError(f"{SEED_ENV} must be an integer, got {env_seed!r}") from exc
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.out is not None:
        doc["out"] = args.out
    return ex.config_from_doc(doc)


def _out_dir(cfg: ex.ExperimentConfig) -> Path:
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ex.ConfigError(f"output directory {out} is not writable: {exc.strerror}") from exc
    return out


def _echo_config(cfg: ex.ExperimentConfig, out: Path) -> None:
    (out / "config.json").write_text(ex.config_json(cfg))


# ------------------------------------------------------------------- commands


def _class_balance(manifest) -> dict[int, int]:
    counts: dict[int, int] = {}
    for s in manifest.scenes:
        for o in s.objects:
            counts[o.original_label] = counts.get(o.original_label, 0) + 1
    return dict(sorted(counts.items()))


def cmd_generate(args, cfg: ex.ExperimentConfig) -> int:
    out = _out_dir(cfg)
    train_m, test_m = ex.clean_manifests(cfg)
    save_manifest(train_m, out / "train.json")
    save_manifest(test_m, out / "test.json")
    _echo_config(cfg, out)
    for name, m in (("train", train_m), ("test", test_m)):
        bal = _class_balance(m)
        total = sum(bal.values())
        share = ", ".join(f"class {c}: {n} ({n / total:.1%})" for c, n in bal.items())
        print(f"{name}: {len(m)} scenes, {total} objects; {share}")
    return EXIT_OK


def _load_or_generate(path: Optional[str], cfg: ex.ExperimentConfig, split: str):
    if path:
        try:
            return load_manifest(path)
        except OSError as exc:
            raise ex.ConfigError(f"cannot read manifest {path}: {exc.strerror}") from exc
    train_m, test_m = ex.clean_manifests(cfg)
    return train_m if split == "train" else test_m


def cmd_poison(args, cfg: ex.ExperimentConfig) -> int:
    out = _out_dir(cfg)
    clean = _load_or_generate(args.manifest, cfg, "train")
    poisoned = ex.poison_train(cfg, clean)
    save_manifest(poisoned, out / "train_poisoned.json")
    _echo_config(cfg, out)
    print(f"poisoned {len(poisoned.edits)} edit(s); realised ratio {poisoned.poison['realized_ratio']:.4f}")
    return EXIT_OK


def write_trace(trace, path: Path) -> Path:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "det_loss", "penalty", "total"])
        for r in trace:
            w.writerow([r.epoch, repr(float(r.det_loss)), repr(float(r.penalty)), repr(float(r.total))])
    return path


def _checkpoint_meta(cfg: ex.ExperimentConfig, tc) -> dict:
    return {"experiment": cfg.to_doc(), "trainer": tc.to_dict()}


def cmd_train(args, cfg: ex.ExperimentConfig) -> int:
    out = _out_dir(cfg)
    if args.manifest:
        manifest = _load_or_generate(args.manifest, cfg, "train")
    else:
        manifest = ex.poison_train(cfg, ex.clean_manifests(cfg)[0])
    tc = cfg.train_config()
    init = None
    if args.resume:
        init, _ = load_checkpoint(args.resume)
    _echo_config(cfg, out)
    try:
        result = train(manifest, tc, init=init)
    except TrainingDiverged as exc:
        save_checkpoint(exc.last_params, out / "checkpoint_last_finite.json", _checkpoint_meta(cfg, tc))
        write_trace(exc.trace, out / "loss_trace.csv")
        print(f"training diverged: {exc}; last finite state saved", file=sys.stderr)
        return EXIT_FAIL
    save_checkpoint(result.params, out / "checkpoint.json", _checkpoint_meta(cfg, tc))
    write_trace(result.trace, out / "loss_trace.csv")
    if result.trace:
        last = result.trace[-1]
        print(f"trained {len(result.trace)} epoch(s): det {last.det_loss:.5f} penalty {last.penalty:.5f}")
    else:
        print("no epochs run; checkpoint unchanged")
    return EXIT_OK


def write_tau_block(report, path: Path) -> Path:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tau_iou", "asr", "tdr"])
        for t in sorted(report.asr):
            w.writerow([t, repr(report.asr[t]), repr(report.tdr[t])])
    return path


def cmd_eval(args, cfg: ex.ExperimentConfig) -> int:
    out = _out_dir(cfg)
    ckpt = args.checkpoint or str(out / "checkpoint.json")
    try:
        params, _ = load_checkpoint(ckpt)
    except OSError as exc:
        raise ex.ConfigError(f"cannot read checkpoint {ckpt}: {exc.strerror}") from exc
    test = _load_or_generate(args.test, cfg, "test")
    try:
        report, outputs = ex.evaluate(params, test, cfg, with_outputs=True)
    except ValueError as exc:
        print(f"evaluation failed: {exc}", file=sys.stderr)
        return EXIT_FAIL
    _echo_config(cfg, out)
    row = ex.result_row(cfg, report)
    write_results_csv([row], out / "results.csv")
    write_tau_block(report, out / "tau_sweep.csv")
    doc = {"config": cfg.to_doc(), "checkpoint": ckpt, "report": _report_doc(report)}
    (out / "results.json").write_text(json.dumps(doc, indent=1))
    write_detection_dump([s.id for s in test.scenes], outputs["clean"], out / "detections.json")
    print(f"mAP {report.map_clean:.4f}  ASR@50 {report.asr[0.5]:.4f}  TDR@50 {report.tdr[0.5]:.4f}  "
          f"poison-mAP {report.poison_map:.4f}  ({report.instances} instances, {report.skipped} skipped)")
    return EXIT_OK


def _report_doc(report) -> dict:
    return {"map_clean": report.map_clean, "poison_map": report.poison_map,
            "asr": {str(k): v for k, v in report.asr.items()}, "tdr": {str(k): v for k, v in report.tdr.items()},
            "instances": report.instances, "skipped": report.skipped, "score_min": report.score_min,
            "sensitivity": {str(k): list(v) for k, v in report.sensitivity.items()}}


def cmd_sweep(args, cfg: ex.ExperimentConfig) -> int:
    out = _out_dir(cfg)
    if not args.axis or not args.values:
        raise ex.ConfigError("sweep needs --axis and --values")
    try:
        sep = ";" if args.axis == "trigger_color" else ","
        values = tuple(ex.parse_axis_value(args.axis, v.strip()) for v in args.values.split(sep) if v.strip())
        spec = ex.SweepSpec(args.axis, values, args.repeats)
    except ValueError as exc:
        raise ex.ConfigError(str(exc)) from exc
    _echo_config(cfg, out)
    rows = ex.run_sweep(cfg, spec, args.workers)
    write_results_csv(rows, out / "sweep.csv")
    failed = sum(1 for r in rows if r["status"] != "ok")
    print(f"{len(rows)} sweep row(s) written, {failed} failed")
    return EXIT_OK


def cmd_verify_theory(args, cfg: ex.ExperimentConfig) -> int:
    out = _out_dir(cfg)
    report = theory.run_all(fault=args.inject_fault)
    report.write(out / "theory_report.json")
    for c in report.checks:
        print(f"{'PASS' if c.passed else 'FAIL'}  {c.name:36s} max_error={c.max_error:.3g} tol={c.tolerance:.3g}")
    print(f"{'all checks passed' if report.passed else 'verification FAILED'} in {report.runtime_s:.1f}s")
    return EXIT_OK if report.passed else EXIT_FAIL


BENCH_COLUMNS = ["run", "batches", "batch_size", "pairs_mean", "penalty_ms_mean", "penalty_ms_std",
                 "total_ms_mean", "total_ms_std", "share_mean", "share_std"]


def cmd_bench(args, cfg: ex.ExperimentConfig) -> int:
    out = _out_dir(cfg)
    _echo_config(cfg, out)
    tc = cfg.train_config()
    manifest = ex.poison_train(cfg, ex.clean_manifests(cfg)[0])
    data = build_training_set(manifest, tc)
    poisoned = benchmark_penalty_overhead(data, tc, args.batches, seed=cfg.seed)
    skip_cfg = dataclasses.replace(tc, penalty_cfg=dataclasses.replace(tc.penalty_cfg, lam=0.0))
    skipped = benchmark_penalty_overhead(data, skip_cfg, args.batches, seed=cfg.seed)
    rows = [("poisoned", poisoned), ("lambda0-skip", skipped)]
    with (out / "bench.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(BENCH_COLUMNS)
        for name, r in rows:
            w.writerow([name, r.batches, r.batch_size, r.pairs_mean, r.penalty_ms_mean, r.penalty_ms_std,
                        r.total_ms_mean, r.total_ms_std, r.share_mean, r.share_std])
    scaling = penalty_scaling(tc, seed=cfg.seed)
    (out / "bench.json").write_text(json.dumps(
        {"config": cfg.to_doc(), "runs": {n: r.to_dict() for n, r in rows},
         "scaling": dataclasses.asdict(scaling)}, indent=1))
    print(f"{'run':14s} {'pairs':>8s} {'penalty ms':>18s} {'total ms':>18s} {'share %':>14s}")
    for name, r in rows:
        print(f"{name:14s} {r.pairs_mean:8.1f} {r.penalty_ms_mean:9.3f} ± {r.penalty_ms_std:6.3f} "
              f"{r.total_ms_mean:9.3f} ± {r.total_ms_std:6.3f} {r.share_mean:6.2f} ± {r.share_std:5.2f}")
    print(f"penalty time vs matched pairs: slope {scaling.slope_ms_per_pair * 1e3:.3f} us/pair, "
          f"R^2 {scaling.r2:.4f}")
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "poison": cmd_poison, "train": cmd_train, "eval": cmd_eval,
            "sweep": cmd_sweep, "verify-theory": cmd_verify_theory, "bench": cmd_bench}


# --------------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="global seed (overrides the config and %s)" % SEED_ENV)
    common.add_argument("--out", help="output directory")
    common.add_argument("--preset", choices=sorted(ex.PRESETS), help="named configuration preset")
    common.add_argument("--workers", type=int, default=None, help="sweep worker processes")
    common.add_argument("--tau", type=float, help="barrier threshold")
    common.add_argument("--rho", type=float, help="IoU gate for penalty pairs")
    common.add_argument("--lambda", dest="lam", type=float, help="penalty weight")
    common.add_argument("--ratio", type=float, help="poisoning ratio")
    common.add_argument("--placement", choices=["center", "random", "high", "low", "both"])
    common.add_argument("--loss", choices=["ce", "bce", "focal"])
    common.add_argument("--head", choices=["independent", "softmax"], help="penalty form")
    common.add_argument("--strategy", help="attack strategy, e.g. baddet+oda, uba, baddet-rma")
    common.add_argument("--target", type=int, help="target class for RMA strategies")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="backdoorlab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("generate", parents=[common], help="write clean train/test manifests")
    p = sub.add_parser("poison", parents=[common], help="apply the configured attack to a train manifest")
    p.add_argument("--manifest", help="clean train manifest (default: regenerate from the config)")
    p = sub.add_parser("train", parents=[common], help="train a detector, write checkpoint and loss trace")
    p.add_argument("--manifest", help="train manifest (default: regenerate and poison from the config)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--epochs", type=int, help="epochs to run (extra epochs when resuming)")
    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", help="checkpoint (default: OUT/checkpoint.json)")
    p.add_argument("--test", help="test manifest (default: regenerate from the config)")
    p = sub.add_parser("sweep", parents=[common], help="run a parameter sweep")
    p.add_argument("--axis", choices=ex.SWEEP_AXES)
    p.add_argument("--values", help="comma-separated values (';' between trigger colours)")
    p.add_argument("--repeats", type=int, default=1)
    p = sub.add_parser("verify-theory", parents=[common], help="run the numerical theory checks")
    p.add_argument("--inject-fault", choices=theory.FAULTS, help=argparse.SUPPRESS)
    p = sub.add_parser("bench", parents=[common], help="time the attack penalty")
    p.add_argument("--batches", type=int, default=50)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"backdoorlab: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = effective_config(args, args.command)
        return COMMANDS[args.command](args, cfg)
    except ex.ConfigError as exc:
        print(f"backdoorlab: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
