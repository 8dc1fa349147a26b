"""Report emission: machine-readable JSON plus per-facet CSV tables.

Report content is fully determined by the sweep/campaign inputs and seeds, so
reruns write byte-identical files; timing lives only in the run manifest.
"""

from __future__ import annotations

import csv
import gzip
import json
from pathlib import Path

import numpy as np

from .bitflip import BitLocation
from .sweep import SweepResult, attacker_bounds, characterize, vulnerability_profile


def report_dict(result: SweepResult, threshold: float | None = None) -> dict:
    """The vulnerability report: counts, ratios, facet breakdowns, profile."""
    thr = float(threshold if threshold is not None else result.config.thresholds[0])
    facets = characterize(result, thr)
    per_repeat = result.per_repeat_ratios(thr)
    rec = result.records
    report = {
        "model_digest": result.model_digest,
        "eval_samples": result.eval_count,
        "pristine_accuracy": result.pristine_accuracy,
        "pristine_per_class": [float(v) for v in result.pristine_per_class],
        "pristine_top_k_accuracy": result.pristine_topk,
        "threshold": thr,
        "params_tested": result.params_per_repeat,
        "repeats": result.repeats,
        "flips_tested": int(len(rec)),
        "flips_applied": int(rec["applied"].sum()),
        "damaging_flips": int((rec["rad"] > thr).sum()),
        "vulnerable_ratio": result.vulnerable_ratio(thr),
        "per_repeat_ratios": per_repeat,
        "vulnerable_params": int(round(result.vulnerable_ratio(thr) * result.params_per_repeat)),
        "by_position": {str(k): v for k, v in sorted(facets["by_position"].items())},
        "by_direction": facets["by_direction"],
        "by_sign": {("positive" if k == 1 else "negative"): v
                    for k, v in facets["by_sign"].items()},
        "by_layer_sign": facets["by_layer_sign"],
        "profile": [{"threshold": t, "ratio": r}
                    for t, r in vulnerability_profile(result, result.config.thresholds)],
        "config": {
            "positions": result.config.positions,
            "directions": result.config.directions,
            "sv_fraction": result.config.sv_fraction,
            "sv_seed": result.config.sv_seed,
            "param_mode": result.config.param_mode,
            "sample_n": result.config.sample_n if result.config.param_mode == "sampled" else None,
            "repeats": result.repeats,
            "sample_seed": result.config.sample_seed,
            "top_k": result.config.top_k,
        },
        "vulnerable_bits": [
            {"tensor": loc.param.tensor, "index": loc.param.index,
             "position": loc.position, "direction": loc.direction.value}
            for loc in result.vulnerable_bits(thr)
        ],
    }
    positions = set(np.unique(rec["position"]).tolist())
    if 31 in positions:
        report["attacker_bounds"] = attacker_bounds(result, threshold=thr)
    return report


def dump_json(obj, path) -> None:
    Path(path).write_bytes(
        json.dumps(obj, sort_keys=True, indent=1).encode("utf-8") + b"\n")


def load_report(path) -> dict:
    return json.loads(Path(path).read_text())


def vulnerable_bits_from_report(report: dict) -> list[BitLocation]:
    from .bitflip import FlipDirection, ParameterRef

    return [BitLocation(ParameterRef(e["tensor"], e["index"]), e["position"],
                        FlipDirection.parse(e["direction"]))
            for e in report["vulnerable_bits"]]


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def write_sweep_csvs(result: SweepResult, outdir, threshold: float | None = None) -> list[str]:
    """Facet tables: damaging flips by bit position and direction, vulnerable
    parameters by layer and sign, ratio-vs-threshold profile."""
    outdir = Path(outdir)
    thr = float(threshold if threshold is not None else result.config.thresholds[0])
    facets = characterize(result, thr)
    written = []

    path = outdir / "bit_position.csv"
    _write_csv(path, ["position", "damaging_flips"],
               sorted(facets["by_position"].items()))
    written.append(path.name)

    path = outdir / "direction.csv"
    _write_csv(path, ["direction", "damaging_flips"],
               sorted(facets["by_direction"].items()))
    written.append(path.name)

    path = outdir / "sign_layer.csv"
    rows = []
    for layer, cells in facets["by_layer_sign"].items():
        rows.append([layer, "positive", cells["positive"], cells["positive_total"]])
        rows.append([layer, "negative", cells["negative"], cells["negative_total"]])
    _write_csv(path, ["layer", "sign", "vulnerable_params", "total_params"], rows)
    written.append(path.name)

    path = outdir / "profile.csv"
    _write_csv(path, ["threshold", "vulnerable_ratio"],
               [(t, r) for t, r in vulnerability_profile(result, result.config.thresholds)])
    written.append(path.name)
    return written


def write_records_csv(result: SweepResult, path) -> None:
    """Full per-flip record stream (one row per evaluated flip), gzipped."""
    rec = result.records
    header = (["repeat", "tensor", "index", "position", "direction", "applied",
               "accuracy", "rad", "top_k_accuracy", "value", "layer"]
              + [f"class_{i}_accuracy" for i in range(result.class_count)])
    dir_names = {0: "0to1", 1: "1to0", 2: "any"}
    with gzip.open(path, "wt", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for r in rec:
            writer.writerow(
                [int(r["repeat"]), result.tensor_names[int(r["tensor"])], int(r["index"]),
                 int(r["position"]), dir_names[int(r["direction"])], int(r["applied"]),
                 repr(float(r["acc"])), repr(float(r["rad"])),
                 "" if np.isnan(r["acc_topk"]) else repr(float(r["acc_topk"])),
                 repr(float(r["value"])), result.layer_names[int(r["layer"])]]
                + [repr(float(v)) for v in r["per_class"]])


def merge_reports(reports: list[dict]) -> dict:
    """Combine sweep reports over disjoint parameter populations: counts add,
    ratios re-weight by tested parameters, facet tables sum."""
    if not reports:
        raise ValueError("no reports to merge")
    merged = dict(reports[0])
    for other in reports[1:]:
        if other["threshold"] != merged["threshold"]:
            raise ValueError("cannot merge reports with different thresholds")
        prev = merged["params_tested"]
        add = other["params_tested"]
        total = prev + add
        merged["vulnerable_ratio"] = (merged["vulnerable_ratio"] * prev
                                      + other["vulnerable_ratio"] * add) / total
        prof_m = {e["threshold"]: e["ratio"] for e in merged["profile"]}
        prof_o = {e["threshold"]: e["ratio"] for e in other["profile"]}
        merged["profile"] = [
            {"threshold": t, "ratio": (prof_m[t] * prev + prof_o[t] * add) / total}
            for t in sorted(set(prof_m) & set(prof_o))]
        merged["params_tested"] = total
        for key in ("flips_tested", "flips_applied", "damaging_flips", "vulnerable_params"):
            merged[key] = merged[key] + other[key]
        for facet in ("by_position", "by_direction", "by_sign"):
            out = dict(merged[facet])
            for k, v in other[facet].items():
                out[k] = out.get(k, 0) + v
            merged[facet] = out
        merged["vulnerable_bits"] = merged["vulnerable_bits"] + other["vulnerable_bits"]
    merged["merged_from"] = len(reports)
    return merged


def write_campaign_outputs(result, outdir) -> list[str]:
    """Campaign JSON plus the attempts/rad tables behind the campaign figures."""
    outdir = Path(outdir)
    written = []
    summary = result.summary()
    dump_json({"summary": summary, "pristine_accuracy": result.pristine_accuracy,
               "config": {"experiments": result.config.experiments,
                          "max_attempts": result.config.max_attempts,
                          "seed": result.config.seed,
                          "crash_prob": result.config.crash_prob,
                          "rad_threshold": result.config.rad_threshold}},
              outdir / "campaign.json")
    written.append("campaign.json")

    path = outdir / "attempts.csv"
    _write_csv(path, ["experiment", "outcome", "hammer_attempts", "flips_landed",
                      "flips_applied", "rad_top1", "rad_top5"],
               [[e.experiment, e.outcome, e.attempts, e.flips_landed, e.flips_applied,
                 "" if e.rad_top1 is None else repr(e.rad_top1),
                 "" if e.rad_topk is None else repr(e.rad_topk)]
                for e in result.experiments])
    written.append("attempts.csv")

    path = outdir / "rad_distribution.csv"
    rows = [[e.experiment, repr(e.rad_top1), repr(e.rad_topk) if e.rad_topk is not None else ""]
            for e in result.experiments if e.outcome == "corrupted"]
    _write_csv(path, ["experiment", "rad_top1", "rad_top5"], rows)
    written.append("rad_distribution.csv")
    return written
