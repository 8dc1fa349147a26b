"""Command-line front end.

Subcommands: ``sweep`` (vulnerability analysis and the targeted/transfer
experiments), ``rowhammer`` (surgical and blind campaigns), ``mitigate``
(hardening transforms), ``report`` (merge/re-emit sweep reports) and ``eval``
(accuracy/logit dumps, the cross-runtime parity surface).

Exit codes: 0 success, 2 configuration error, 3 input format/data error.
Every run writes a manifest beside its outputs; all randomness flows from
``--seed`` and the tool never mutates its input files.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .engine import Engine, accuracy
from .formats import (Dataset, FormatError, file_sha256, load_dataset,
                      load_model, save_model)
from .mitigate import binarize, calibrate_clamp, quantize8, substitute_activation
from .model import ModelError
from .reports import (dump_json, load_report, merge_reports, report_dict,
                      vulnerable_bits_from_report, write_campaign_outputs,
                      write_records_csv, write_sweep_csvs)
from .rowhammer import (CampaignConfig, MemoryLayout, SURGICAL_MIN_OBJECT_BYTES,
                        TemplateDBError, blind_campaign, load_template_db,
                        surgical_search)
from .sweep import (ConfigError, SweepConfig, run_sweep, targeted_search,
                    transfer_overlap)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_FORMAT = 3


def _manifest(command: str, args: argparse.Namespace, inputs: list[str],
              outputs: list[str], wall_time_s: float) -> dict:
    config = {k: v for k, v in sorted(vars(args).items())
              if k not in ("func",) and not isinstance(v, Path)}
    for k, v in vars(args).items():
        if isinstance(v, Path):
            config[k] = str(v)
    return {
        "tool": "gracile",
        "version": __version__,
        "backend": kernels.backend_name(),
        "command": command,
        "config": config,
        "inputs": {p: file_sha256(p) for p in inputs if p and Path(p).exists()},
        "outputs": outputs,
        "wall_time_s": round(wall_time_s, 3),
    }


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _parse_thresholds(text: str) -> tuple[float, ...]:
    try:
        values = tuple(float(t) for t in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"bad threshold list {text!r}") from exc
    if not values:
        raise ConfigError("empty threshold list")
    return values


def cmd_sweep(args) -> int:
    started = time.time()
    model = load_model(args.model)
    dataset = load_dataset(args.data)
    out = _outdir(args)
    outputs: list[str] = []

    if args.targeted:
        try:
            orig_s, target_s = args.targeted.split(":")
            orig, target = int(orig_s), int(target_s)
        except ValueError as exc:
            raise ConfigError(f"--targeted wants ORIG:TARGET, got {args.targeted!r}") from exc
        engine = Engine(model, backend="numpy")
        scores = engine.forward(dataset.images)
        pred = scores.argmax(axis=1)
        candidates = np.nonzero((dataset.labels == orig) & (pred == dataset.labels))[0]
        if len(candidates) == 0:
            raise ConfigError(f"no correctly classified sample of class {orig}")
        target_index = int(candidates[0])
        locations = targeted_search(model, dataset, target_index, target,
                                    rad_budget=args.rad_budget,
                                    positions=args.bits, directions=args.dirs,
                                    sv_fraction=args.sv_fraction or 0.1,
                                    sv_seed=args.seed)
        payload = {
            "mode": "targeted", "original_class": orig, "target_class": target,
            "target_sample": target_index, "rad_budget": args.rad_budget,
            "locations": [{"tensor": l.param.tensor, "index": l.param.index,
                           "position": l.position, "direction": l.direction.value}
                          for l in locations],
            "count": len(locations),
        }
        dump_json(payload, out / "targeted.json")
        outputs.append("targeted.json")
        print(f"targeted {orig}->{target}: {len(locations)} locations "
              f"(sample {target_index})")
    elif args.transfer_student:
        student = load_model(args.transfer_student)
        if not args.transfer_layers:
            raise ConfigError("--transfer-student needs --transfer-layers")
        layer_map = [(name, name) for name in args.transfer_layers.split(",")]
        overlap = transfer_overlap(model, student, dataset, dataset, layer_map,
                                   sample_per_layer=args.transfer_n, seed=args.seed,
                                   positions=args.bits, directions=args.dirs)
        dump_json({"mode": "transfer", "per_layer": overlap}, out / "transfer.json")
        outputs.append("transfer.json")
        print(json.dumps(overlap, indent=1, sort_keys=True))
    else:
        config = SweepConfig(
            positions=args.bits, directions=args.dirs,
            sv_fraction=args.sv_fraction, sv_seed=args.seed,
            param_mode="sampled" if args.sample_params else "all",
            sample_n=args.sample_params or 20000, repeats=args.repeats,
            sample_seed=args.seed, thresholds=_parse_thresholds(args.thresholds),
            top_k=args.top_k, min_tensor_bytes=args.min_tensor_bytes,
            exclude_running_stats=args.exclude_running_stats, workers=args.workers)
        result = run_sweep(model, dataset, config)
        report = report_dict(result)
        dump_json(report, out / "report.json")
        outputs.append("report.json")
        outputs += write_sweep_csvs(result, out)
        if args.records:
            write_records_csv(result, out / "records.csv.gz")
            outputs.append("records.csv.gz")
        print(f"params={report['params_tested']} flips={report['flips_tested']} "
              f"vulnerable_ratio={report['vulnerable_ratio']:.4f}")
    dump_json(_manifest("sweep", args, [args.model, args.data], outputs,
                        time.time() - started), out / "manifest.json")
    return EXIT_OK


def cmd_rowhammer(args) -> int:
    started = time.time()
    model = load_model(args.model)
    out = _outdir(args)
    outputs: list[str] = []
    db = load_template_db(args.db)
    layout = MemoryLayout.build(model, code_bytes=args.code_bytes,
                                min_object_bytes=args.min_object_bytes,
                                seed=args.seed)
    if args.mode == "surgical":
        if not args.sweep_report:
            raise ConfigError("surgical mode needs --sweep-report for the vulnerable bits")
        bits = vulnerable_bits_from_report(load_report(args.sweep_report))
        result = surgical_search(db, layout, model, bits, seed=args.seed)
        payload = {
            "mode": "surgical", "setup": result.setup, "attempts": result.attempts,
            "exhausted": result.exhausted, "row_id": result.row_id,
            "template": result.template,
            "estimated_wall_time_ms": result.wall_time_ms,
        }
        dump_json(payload, out / "surgical.json")
        outputs.append("surgical.json")
        if result.exhausted:
            print(f"setup {result.setup}: exhausted after {result.attempts} rows")
        else:
            print(f"setup {result.setup}: first vulnerable template after "
                  f"{result.attempts} attempts (~{result.wall_time_ms} ms of hammering)")
    else:
        dataset = load_dataset(args.data)
        config = CampaignConfig(experiments=args.experiments,
                                max_attempts=args.max_attempts, seed=args.seed,
                                crash_prob=args.crash_prob)
        result = blind_campaign(db, layout, model, dataset, config)
        outputs += write_campaign_outputs(result, out)
        s = result.summary()
        print(f"setup {s['setup']}: {s['corrupted']}/{s['experiments']} corrupted, "
              f"{s['crashed']} crashes, {s['timed_out']} timeouts")
    inputs = [args.model, args.db] + ([args.data] if args.mode == "blind" else [])
    if args.mode == "surgical" and args.sweep_report:
        inputs.append(args.sweep_report)
    dump_json(_manifest("rowhammer", args, inputs, outputs, time.time() - started),
              out / "manifest.json")
    return EXIT_OK


def cmd_mitigate(args) -> int:
    started = time.time()
    model = load_model(args.model)
    dataset = load_dataset(args.data) if args.data else None
    if args.transform in ("clamp",) and dataset is None:
        raise ConfigError("clamp calibration needs --data")
    if args.transform == "relu6":
        transformed = substitute_activation(model, "relu6")
    elif args.transform == "tanh":
        transformed = substitute_activation(model, "tanh")
    elif args.transform == "clamp":
        bounds = calibrate_clamp(model, dataset.images)
        transformed = substitute_activation(model, "reluclamp", clamp_bounds=bounds)
    elif args.transform == "quant8":
        transformed = quantize8(model)
    elif args.transform == "binarize":
        transformed = binarize(model)
    else:
        raise ConfigError(f"unknown transform {args.transform!r}")
    out_path = Path(args.out_model)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_model(transformed, out_path)
    info = {"transform": args.transform, "output": str(out_path)}
    if dataset is not None:
        info["accuracy_before"] = accuracy(model, dataset.images, dataset.labels)
        info["accuracy_after"] = accuracy(transformed, dataset.images, dataset.labels)
    print(json.dumps(info, indent=1, sort_keys=True))
    manifest_path = out_path.with_suffix(out_path.suffix + ".manifest.json")
    dump_json(_manifest("mitigate", args, [args.model, args.data or ""],
                        [out_path.name], time.time() - started), manifest_path)
    return EXIT_OK


def cmd_report(args) -> int:
    started = time.time()
    if not args.inputs:
        raise ConfigError("report needs at least one input report")
    reports = [load_report(p) for p in args.inputs]
    merged = merge_reports(reports)
    out = _outdir(args)
    dump_json(merged, out / "merged_report.json")
    outputs = ["merged_report.json"]
    with open(out / "profile.csv", "w") as fh:
        fh.write("threshold,vulnerable_ratio\n")
        for entry in merged["profile"]:
            fh.write(f"{entry['threshold']},{entry['ratio']}\n")
    outputs.append("profile.csv")
    dump_json(_manifest("report", args, list(args.inputs), outputs,
                        time.time() - started), out / "manifest.json")
    print(f"merged {len(reports)} reports: vulnerable_ratio="
          f"{merged['vulnerable_ratio']:.4f} over {merged['params_tested']} params")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_model(args.model)
    dataset = load_dataset(args.data)
    limit = args.limit or len(dataset)
    images = dataset.images[:limit]
    labels = dataset.labels[:limit]
    engine = Engine(model, backend="numpy")
    payload = {"samples": int(len(images)),
               "accuracy": accuracy(model, images, labels)}
    if args.top_k:
        payload[f"top_{args.top_k}_accuracy"] = accuracy(model, images, labels,
                                                         top_k=args.top_k)
    if args.logits:
        logits = engine.logits(images)
        with open(args.logits, "w") as fh:
            cols = ",".join(f"logit_{i}" for i in range(logits.shape[1]))
            fh.write(f"sample,label,{cols}\n")
            for i in range(len(images)):
                row = ",".join(repr(float(v)) for v in logits[i])
                fh.write(f"{i},{int(labels[i])},{row}\n")
        payload["logits"] = args.logits
    print(json.dumps(payload, indent=1, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gracile",
        description="Bit-flip vulnerability analysis and fault-attack simulation")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sweep", help="vulnerability sweep / targeted / transfer analysis")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="sweep_out")
    p.add_argument("--bits", choices=("all", "exp", "msb"), default="all")
    p.add_argument("--dirs", choices=("both", "0to1"), default="both")
    p.add_argument("--sv-fraction", type=float, default=None)
    p.add_argument("--sample-params", type=int, default=None)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--thresholds", default="0.1")
    p.add_argument("--top-k", type=int, default=None)
    p.add_argument("--min-tensor-bytes", type=int, default=0)
    p.add_argument("--exclude-running-stats", action="store_true")
    p.add_argument("--records", action="store_true",
                   help="also write the full per-flip record stream")
    p.add_argument("--targeted", metavar="ORIG:TARGET", default=None)
    p.add_argument("--rad-budget", type=float, default=0.05)
    p.add_argument("--transfer-student", default=None)
    p.add_argument("--transfer-layers", default=None)
    p.add_argument("--transfer-n", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=0)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("rowhammer", help="surgical or blind fault campaign")
    p.add_argument("--mode", choices=("surgical", "blind"), required=True)
    p.add_argument("--db", required=True, help="flip-template database file")
    p.add_argument("--model", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--out", default="rowhammer_out")
    p.add_argument("--sweep-report", default=None)
    p.add_argument("--experiments", type=int, default=25)
    p.add_argument("--max-attempts", type=int, default=300)
    p.add_argument("--crash-prob", type=float, default=CampaignConfig.crash_prob)
    p.add_argument("--code-bytes", type=int, default=None)
    p.add_argument("--min-object-bytes", type=int, default=SURGICAL_MIN_OBJECT_BYTES)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_rowhammer)

    p = sub.add_parser("mitigate", help="apply a hardening transform")
    p.add_argument("--model", required=True)
    p.add_argument("--transform", required=True,
                   choices=("relu6", "tanh", "clamp", "quant8", "binarize"))
    p.add_argument("--data", default=None, help="calibration dataset")
    p.add_argument("--out-model", required=True)
    p.set_defaults(func=cmd_mitigate)

    p = sub.add_parser("report", help="merge sweep reports and emit tables")
    p.add_argument("--inputs", nargs="*", default=[])
    p.add_argument("--out", default="report_out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("eval", help="accuracy / logits of a model on a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--top-k", type=int, default=None)
    p.add_argument("--logits", default=None, help="write per-sample logits CSV here")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad flags, matching the config-error contract
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, TemplateDBError, ModelError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_FORMAT


if __name__ == "__main__":
    sys.exit(main())
