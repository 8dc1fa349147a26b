"""Vulnerability sweeps: enumerate flips, measure relative accuracy drop,
apply the speed-up heuristics, and build characterization reports.

A parameter is *vulnerable* when at least one of its tested flips pushes the
relative accuracy drop strictly above the threshold (default 0.1). Work is
partitioned over (parameter, position, direction) triples; workers own
private model copies and merge commutatively, so reports are identical for
any worker count.
"""

from __future__ import annotations

import contextlib
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .bitflip import (BitLocation, FlipDirection, ParameterRef, apply_flip,
                      revert_flip)
from .engine import CachedEvaluator, Engine
from .formats import Dataset, enumerate_parameters, model_from_bytes, model_to_bytes
from .model import Model

DAMAGE_THRESHOLD = 0.1

_DIR_CODES = {FlipDirection.ZERO_TO_ONE: 0, FlipDirection.ONE_TO_ZERO: 1,
              FlipDirection.UNCONDITIONAL: 2}
_CODE_DIRS = {v: k for k, v in _DIR_CODES.items()}


class ConfigError(ValueError):
    """Invalid sweep or campaign configuration."""


def rad(acc_pristine: float, acc_corrupted: float) -> float:
    """Relative accuracy drop. Negative when the corruption helps; at most 1."""
    if acc_pristine <= 0:
        raise ValueError("relative accuracy drop needs a positive pristine accuracy")
    return (acc_pristine - acc_corrupted) / acc_pristine


@dataclass(frozen=True)
class SweepConfig:
    positions: str = "all"          # all | exp | msb   (f32 tensors)
    directions: str = "both"        # both | 0to1
    sv_fraction: float | None = None  # stratified per-class validation sample
    sv_seed: int = 0
    param_mode: str = "all"         # all | sampled
    sample_n: int = 20000
    repeats: int = 5
    sample_seed: int = 0
    thresholds: tuple[float, ...] = (DAMAGE_THRESHOLD,)
    top_k: int | None = None
    min_tensor_bytes: int = 0
    exclude_running_stats: bool = False
    workers: int = 0                # 0 = GRACILE_WORKERS or cpu count

    def validate(self) -> None:
        if self.positions not in ("all", "exp", "msb"):
            raise ConfigError(f"positions must be all|exp|msb, got {self.positions!r}")
        if self.directions not in ("both", "0to1"):
            raise ConfigError(f"directions must be both|0to1, got {self.directions!r}")
        if self.sv_fraction is not None and not 0 < self.sv_fraction <= 1:
            raise ConfigError("sv_fraction must be in (0, 1]")
        if self.param_mode not in ("all", "sampled"):
            raise ConfigError(f"param_mode must be all|sampled, got {self.param_mode!r}")
        if self.param_mode == "sampled" and self.sample_n < 1:
            raise ConfigError("sample_n must be positive")
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")
        if list(self.thresholds) != sorted(self.thresholds):
            raise ConfigError("thresholds must be ascending")


def resolve_workers(requested: int) -> int:
    if requested > 0:
        return requested
    env = os.environ.get("GRACILE_WORKERS", "")
    if env.strip():
        value = int(env)
        if value > 0:
            return value
    return os.cpu_count() or 1


def positions_for_dtype(dtype: str, mode: str) -> tuple[int, ...]:
    """Bit positions tested for a tensor dtype under a position mode.

    Position modes describe float32 words; 8-bit tensors are narrow enough
    that all modes but msb sweep them exhaustively, and binarized tensors
    expose a single sign swap.
    """
    if dtype == "f32":
        if mode == "exp":
            return tuple(range(24, 32))
        if mode == "msb":
            return (31,)
        return tuple(range(1, 33))
    if dtype == "u8-quant":
        return (8,) if mode == "msb" else tuple(range(1, 9))
    return (1,)  # i8-binary: negation


def directions_for_dtype(dtype: str, mode: str) -> tuple[FlipDirection, ...]:
    if dtype == "i8-binary":
        return (FlipDirection.UNCONDITIONAL,)
    if mode == "0to1":
        return (FlipDirection.ZERO_TO_ONE,)
    return (FlipDirection.ZERO_TO_ONE, FlipDirection.ONE_TO_ZERO)


def record_dtype(class_count: int) -> np.dtype:
    return np.dtype([
        ("repeat", np.uint16), ("tensor", np.uint16), ("index", np.uint32),
        ("position", np.uint8), ("direction", np.uint8), ("applied", np.uint8),
        ("acc", np.float64), ("rad", np.float64), ("acc_topk", np.float64),
        ("per_class", np.float32, (class_count,)),
        ("value", np.float32), ("layer", np.uint16),
    ])


def stratified_sample(labels: np.ndarray, fraction: float, seed: int) -> np.ndarray:
    """Per-class sample of at least one element per class, sorted indices."""
    rng = np.random.default_rng(seed)
    picks = []
    for cls in np.unique(labels):
        idx = np.nonzero(labels == cls)[0]
        take = max(1, int(round(len(idx) * fraction)))
        picks.append(rng.choice(idx, size=take, replace=False))
    return np.sort(np.concatenate(picks))


@contextlib.contextmanager
def _single_blas_thread():
    """Pin BLAS to one thread so results cannot depend on thread-count splits."""
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        yield
        return
    with threadpool_limits(limits=1):
        yield


def _sweep_refs(evaluator: CachedEvaluator, tensor_ids: dict[str, int],
                refs: list[ParameterRef], config: SweepConfig, repeat: int,
                out: np.ndarray, offset: int) -> int:
    """Evaluate all flips for a chunk of parameter refs into ``out``."""
    model = evaluator.model
    pristine = evaluator.pristine
    f32_views: dict[str, np.ndarray] = {}
    row = offset
    for ref in refs:
        tensor = model.params[ref.tensor]
        if ref.tensor not in f32_views:
            f32_views[ref.tensor] = tensor.as_f32().reshape(-1)
        value = f32_views[ref.tensor][ref.index]
        layer = model.layer_of_tensor(ref.tensor)
        for pos in positions_for_dtype(tensor.dtype, config.positions):
            for direction in directions_for_dtype(tensor.dtype, config.directions):
                token = apply_flip(model.params, BitLocation(ref, pos, direction))
                if token.applied:
                    stats = evaluator.eval_flip(ref.tensor, ref.index)
                    revert_flip(model.params, token)
                else:
                    stats = pristine
                rec = out[row]
                rec["repeat"] = repeat
                rec["tensor"] = tensor_ids[ref.tensor]
                rec["index"] = ref.index
                rec["position"] = pos
                rec["direction"] = _DIR_CODES[direction]
                rec["applied"] = 1 if token.applied else 0
                rec["acc"] = stats.accuracy
                rec["rad"] = rad(pristine.accuracy, stats.accuracy)
                rec["acc_topk"] = (np.nan if stats.top_k_accuracy is None
                                   else stats.top_k_accuracy)
                rec["per_class"] = stats.per_class
                rec["value"] = value
                rec["layer"] = layer
                row += 1
    return row


_WORKER: dict = {}


def _worker_init(model_bytes: bytes, images: np.ndarray, labels: np.ndarray,
                 top_k: int | None, class_count: int):
    import threadpoolctl

    _WORKER["limit"] = threadpoolctl.threadpool_limits(limits=1)
    model = model_from_bytes(model_bytes)
    _WORKER["evaluator"] = CachedEvaluator(model, images, labels, top_k=top_k)
    _WORKER["tensor_ids"] = {n: i for i, n in enumerate(model.spec.parameter_names())}
    _WORKER["class_count"] = class_count


def _worker_chunk(args) -> bytes:
    refs, config, repeat = args
    evaluator: CachedEvaluator = _WORKER["evaluator"]
    dtype = record_dtype(_WORKER["class_count"])
    count = _chunk_record_count(evaluator.model, refs, config)
    out = np.zeros(count, dtype=dtype)
    _sweep_refs(evaluator, _WORKER["tensor_ids"], refs, config, repeat, out, 0)
    return out.tobytes()


def _chunk_record_count(model: Model, refs: list[ParameterRef], config: SweepConfig) -> int:
    total = 0
    for ref in refs:
        dtype = model.params[ref.tensor].dtype
        total += (len(positions_for_dtype(dtype, config.positions))
                  * len(directions_for_dtype(dtype, config.directions)))
    return total


@dataclass
class SweepResult:
    """Raw sweep records plus the context needed to interpret them."""

    model_digest: str
    tensor_names: list[str]
    layer_names: list[str]
    class_count: int
    eval_count: int
    pristine_accuracy: float
    pristine_per_class: np.ndarray
    pristine_topk: float | None
    params_per_repeat: int
    repeats: int
    config: SweepConfig
    records: np.ndarray
    sv_indices: np.ndarray | None = None

    def canonical_sort(self) -> None:
        order = np.lexsort((self.records["direction"], self.records["position"],
                            self.records["index"], self.records["tensor"],
                            self.records["repeat"]))
        self.records = self.records[order]

    def vulnerable_mask_by_param(self, threshold: float = DAMAGE_THRESHOLD,
                                 positions: tuple[int, ...] | None = None,
                                 repeat: int | None = None):
        """Unique (repeat, tensor, index) rows and whether each is vulnerable."""
        rec = self.records
        sel = np.ones(len(rec), dtype=bool)
        if positions is not None:
            sel &= np.isin(rec["position"], positions)
        if repeat is not None:
            sel &= rec["repeat"] == repeat
        rec = rec[sel]
        keys = np.stack([rec["repeat"].astype(np.int64),
                         rec["tensor"].astype(np.int64),
                         rec["index"].astype(np.int64)], axis=1)
        uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
        damaging = rec["rad"] > threshold
        vulnerable = np.zeros(len(uniq), dtype=bool)
        np.maximum.at(vulnerable, inverse, damaging)
        return uniq, vulnerable

    def vulnerable_ratio(self, threshold: float = DAMAGE_THRESHOLD,
                         positions: tuple[int, ...] | None = None) -> float:
        """Mean over repeats of the per-repeat vulnerable parameter ratio."""
        ratios = self.per_repeat_ratios(threshold, positions)
        return float(np.mean(ratios))

    def per_repeat_ratios(self, threshold: float = DAMAGE_THRESHOLD,
                          positions: tuple[int, ...] | None = None) -> list[float]:
        uniq, vulnerable = self.vulnerable_mask_by_param(threshold, positions)
        ratios = []
        for rep in range(self.repeats):
            mask = uniq[:, 0] == rep
            total = int(mask.sum())
            ratios.append(float(vulnerable[mask].sum() / total) if total else 0.0)
        return ratios

    def vulnerable_params(self, threshold: float = DAMAGE_THRESHOLD) -> set[tuple[str, int]]:
        """Union over repeats of vulnerable (tensor name, index) pairs."""
        uniq, vulnerable = self.vulnerable_mask_by_param(threshold)
        out = set()
        for (rep, tid, idx), vul in zip(uniq.tolist(), vulnerable.tolist()):
            if vul:
                out.add((self.tensor_names[tid], idx))
        return out

    def vulnerable_bits(self, threshold: float = DAMAGE_THRESHOLD) -> list[BitLocation]:
        rec = self.records[self.records["rad"] > threshold]
        locations = []
        seen = set()
        for r in rec:
            key = (int(r["tensor"]), int(r["index"]), int(r["position"]), int(r["direction"]))
            if key in seen:
                continue
            seen.add(key)
            locations.append(BitLocation(
                ParameterRef(self.tensor_names[key[0]], key[1]), key[2], _CODE_DIRS[key[3]]))
        return locations

    def restore_check(self, model: Model, before: bytes) -> bool:
        return model.params.state_bytes() == before


def run_sweep(model: Model, dataset: Dataset, config: SweepConfig) -> SweepResult:
    """Evaluate every selected (parameter, position, direction) exactly once.

    The model is restored bit-exact afterwards; records are deterministic
    given the config seeds and independent of the worker count.
    """
    config.validate()
    import hashlib

    state_before = model.params.state_bytes()
    model_bytes = model_to_bytes(model)
    digest = hashlib.sha256(model_bytes).hexdigest()

    if config.sv_fraction is not None:
        sv_indices = stratified_sample(dataset.labels, config.sv_fraction, config.sv_seed)
        eval_ds = dataset.subset(sv_indices)
    else:
        sv_indices = None
        eval_ds = dataset

    base_refs = enumerate_parameters(model, min_tensor_bytes=config.min_tensor_bytes,
                                     exclude_running_stats=config.exclude_running_stats)
    repeats = config.repeats if config.param_mode == "sampled" else 1
    per_repeat_refs: list[list[ParameterRef]] = []
    if config.param_mode == "sampled":
        if config.sample_n > len(base_refs):
            raise ConfigError(
                f"cannot sample {config.sample_n} parameters from {len(base_refs)}")
        for rep in range(repeats):
            per_repeat_refs.append(enumerate_parameters(
                model, min_tensor_bytes=config.min_tensor_bytes,
                exclude_running_stats=config.exclude_running_stats,
                sample=config.sample_n, seed=config.sample_seed + rep))
    else:
        per_repeat_refs.append(base_refs)

    tensor_names = model.spec.parameter_names()
    tensor_ids = {n: i for i, n in enumerate(tensor_names)}
    layer_names = [layer.name for layer in model.spec.layers]
    dtype = record_dtype(dataset.class_count)

    workers = resolve_workers(config.workers)
    chunks: list[tuple[list[ParameterRef], SweepConfig, int]] = []
    chunk_size = max(8, min(256, (sum(len(r) for r in per_repeat_refs) // (workers * 16)) or 8))
    for rep, refs in enumerate(per_repeat_refs):
        for start in range(0, len(refs), chunk_size):
            chunks.append((refs[start:start + chunk_size], config, rep))

    total_records = sum(_chunk_record_count(model, c[0], config) for c in chunks)
    records = np.zeros(total_records, dtype=dtype)

    if workers == 1 or len(chunks) <= 1:
        with _single_blas_thread():
            evaluator = CachedEvaluator(model, eval_ds.images, eval_ds.labels,
                                        top_k=config.top_k)
            row = 0
            for refs, cfg, rep in chunks:
                row = _sweep_refs(evaluator, tensor_ids, refs, cfg, rep, records, row)
            pristine = evaluator.pristine
    else:
        with ProcessPoolExecutor(
                max_workers=workers, initializer=_worker_init,
                initargs=(model_bytes, eval_ds.images, eval_ds.labels,
                          config.top_k, dataset.class_count)) as pool:
            row = 0
            for blob in pool.map(_worker_chunk, chunks, chunksize=1):
                part = np.frombuffer(blob, dtype=dtype)
                records[row:row + len(part)] = part
                row += len(part)
        with _single_blas_thread():
            evaluator = CachedEvaluator(model, eval_ds.images, eval_ds.labels,
                                        top_k=config.top_k)
            pristine = evaluator.pristine

    if model.params.state_bytes() != state_before:
        raise RuntimeError("sweep failed to restore the model bit-exact")

    result = SweepResult(
        model_digest=digest, tensor_names=tensor_names, layer_names=layer_names,
        class_count=dataset.class_count, eval_count=len(eval_ds),
        pristine_accuracy=pristine.accuracy,
        pristine_per_class=pristine.per_class,
        pristine_topk=pristine.top_k_accuracy,
        params_per_repeat=len(per_repeat_refs[0]), repeats=repeats,
        config=config, records=records, sv_indices=sv_indices)
    result.canonical_sort()
    return result


def characterize(result: SweepResult, threshold: float = DAMAGE_THRESHOLD) -> dict:
    """Breakdown tables: damaging flips by position/direction, vulnerable
    parameters by sign and by (layer, sign)."""
    rec = result.records
    if len(rec) == 0:
        raise ValueError("characterize requires a nonempty record set")
    damaging = rec["rad"] > threshold
    by_position = {int(p): int(((rec["position"] == p) & damaging).sum())
                   for p in np.unique(rec["position"])}
    dir_names = {0: "0to1", 1: "1to0", 2: "any"}
    by_direction = {dir_names[int(d)]: int(((rec["direction"] == d) & damaging).sum())
                    for d in np.unique(rec["direction"])}

    keys = np.stack([rec["tensor"].astype(np.int64), rec["index"].astype(np.int64)], axis=1)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    vulnerable = np.zeros(len(uniq), dtype=bool)
    np.maximum.at(vulnerable, inverse, damaging)
    first_row = np.full(len(uniq), len(rec), dtype=np.int64)
    np.minimum.at(first_row, inverse, np.arange(len(rec)))
    # Recover one representative record per parameter for sign/layer facets.
    param_sign = np.where(rec["value"][first_row] >= 0, 1, -1)
    param_layer = rec["layer"][first_row]

    by_sign = {int(s): int(vulnerable[param_sign == s].sum()) for s in (1, -1)}
    by_layer_sign = {}
    for lid in np.unique(param_layer):
        lname = result.layer_names[int(lid)]
        sel = param_layer == lid
        by_layer_sign[lname] = {
            "positive": int(vulnerable[sel & (param_sign == 1)].sum()),
            "negative": int(vulnerable[sel & (param_sign == -1)].sum()),
            "positive_total": int((sel & (param_sign == 1)).sum()),
            "negative_total": int((sel & (param_sign == -1)).sum()),
        }
    return {"by_position": by_position, "by_direction": by_direction,
            "by_sign": by_sign, "by_layer_sign": by_layer_sign,
            "threshold": threshold}


def vulnerability_profile(result: SweepResult, grid) -> list[tuple[float, float]]:
    """Vulnerable parameter ratio at each threshold of an ascending grid."""
    grid = list(grid)
    if grid != sorted(grid):
        raise ValueError("threshold grid must be ascending")
    return [(float(t), result.vulnerable_ratio(threshold=float(t))) for t in grid]


def attacker_bounds(result: SweepResult, bits_per_param: int = 32,
                    threshold: float = DAMAGE_THRESHOLD) -> dict:
    """Success-rate estimates for the three attacker models.

    A flip-anywhere attacker armed with templates (surgical white-box) always
    succeeds once any vulnerable parameter exists; the black-box variant
    targets the top exponent bit blind to the parameter's identity; the blind
    lower bound divides that by the word width.
    """
    ratio = result.vulnerable_ratio(threshold=threshold)
    positions = set(np.unique(result.records["position"]).tolist())
    if 31 in positions:
        pos31_ratio = result.vulnerable_ratio(threshold=threshold, positions=(31,))
    else:
        raise ValueError("attacker bounds need records for bit position 31")
    return {
        "surgical_whitebox": 1.0 if ratio > 0 else 0.0,
        "surgical_blackbox": pos31_ratio,
        "blind_lower_bound": pos31_ratio / bits_per_param,
    }


def targeted_search(model: Model, dataset: Dataset, target_index: int,
                    target_class: int, rad_budget: float = 0.05,
                    positions: str = "exp", directions: str = "0to1",
                    sv_fraction: float = 0.1, sv_seed: int = 0) -> list[BitLocation]:
    """Flips that reclassify one sample as the target class while keeping the
    overall relative accuracy drop under the budget.

    Candidates are prefiltered on the target sample alone, then on a
    stratified validation sample, and finally confirmed on the full set.
    """
    if not 0 <= target_index < len(dataset):
        raise ValueError(f"target index {target_index} out of range")
    if not 0 <= target_class < dataset.class_count:
        raise ValueError(f"target class {target_class} out of range")
    engine = Engine(model, backend="numpy")
    target_image = dataset.images[target_index:target_index + 1]
    pristine_pred = int(engine.forward(target_image).argmax(axis=1)[0])
    if pristine_pred == target_class:
        raise ValueError("target sample is already classified as the target class")

    with _single_blas_thread():
        target_eval = CachedEvaluator(model, target_image,
                                      dataset.labels[target_index:target_index + 1])
        sv_idx = stratified_sample(dataset.labels, sv_fraction, sv_seed)
        sv_eval = CachedEvaluator(model, dataset.images[sv_idx], dataset.labels[sv_idx])
        full_eval = CachedEvaluator(model, dataset.images, dataset.labels)

        refs = enumerate_parameters(model)
        found: list[BitLocation] = []
        for ref in refs:
            tensor = model.params[ref.tensor]
            for pos in positions_for_dtype(tensor.dtype, positions):
                for direction in directions_for_dtype(tensor.dtype, directions):
                    loc = BitLocation(ref, pos, direction)
                    token = apply_flip(model.params, loc)
                    if not token.applied:
                        revert_flip(model.params, token)
                        continue
                    scores = target_eval.eval_flip(ref.tensor, ref.index, want_scores=True)
                    hit = (not np.isnan(scores[0]).any()
                           and int(scores[0].argmax()) == target_class)
                    if hit:
                        sv_stats = sv_eval.eval_flip(ref.tensor, ref.index)
                        if rad(sv_eval.pristine.accuracy, sv_stats.accuracy) < rad_budget:
                            full_stats = full_eval.eval_flip(ref.tensor, ref.index)
                            if rad(full_eval.pristine.accuracy, full_stats.accuracy) < rad_budget:
                                found.append(loc)
                    revert_flip(model.params, token)
    return found


def transfer_overlap(teacher: Model, student: Model, teacher_ds: Dataset,
                     student_ds: Dataset, layer_map: list[tuple[str, str]],
                     sample_per_layer: int = 1000, seed: int = 0,
                     threshold: float = DAMAGE_THRESHOLD,
                     positions: str = "exp", directions: str = "0to1") -> dict:
    """Per-layer overlap between teacher-vulnerable and student-vulnerable
    parameters under identical flips.

    Mapped layers must be shape-identical; frozen layers share bytes, so the
    same (tensor, index, bit) addresses corrupt both models. Layers where the
    teacher has no vulnerable parameters report ``overlap`` as None.
    """
    rng = np.random.default_rng(seed)
    out = {}
    with _single_blas_thread():
        t_eval = CachedEvaluator(teacher, teacher_ds.images, teacher_ds.labels)
        s_eval = CachedEvaluator(student, student_ds.images, student_ds.labels)
        for t_layer, s_layer in layer_map:
            t_idx = teacher.spec.layer_index(t_layer)
            s_idx = student.spec.layer_index(s_layer)
            t_names = teacher.spec.layers[t_idx].parameter_names()
            s_names = student.spec.layers[s_idx].parameter_names()
            if len(t_names) != len(s_names):
                raise ValueError(f"layers {t_layer!r}/{s_layer!r} declare different parameters")
            for tn, sn in zip(t_names, s_names):
                if teacher.params[tn].shape != student.params[sn].shape:
                    raise ValueError(f"mapped tensors {tn!r}/{sn!r} differ in shape")
            population = [(tn, sn, teacher.params[tn].data.size)
                          for tn, sn in zip(t_names, s_names)]
            total = sum(size for _, _, size in population)
            take = min(sample_per_layer, total)
            chosen = np.sort(rng.choice(total, size=take, replace=False))
            t_vul, s_vul, shared = 0, 0, 0
            base = 0
            flat = []
            for tn, sn, size in population:
                flat.append((tn, sn, base, size))
                base += size
            for global_idx in chosen.tolist():
                tn, sn, start = next((tn, sn, st) for tn, sn, st, size in flat
                                     if st <= global_idx < st + size)
                idx = global_idx - start
                tv = _param_vulnerable(t_eval, tn, idx, threshold, positions, directions)
                sv = _param_vulnerable(s_eval, sn, idx, threshold, positions, directions)
                t_vul += tv
                s_vul += sv
                shared += tv and sv
            out[t_layer] = {
                "sampled": take,
                "teacher_vulnerable": t_vul,
                "student_vulnerable": s_vul,
                "shared": shared,
                "overlap": (shared / t_vul) if t_vul else None,
            }
    return out


def _param_vulnerable(evaluator: CachedEvaluator, tensor_name: str, index: int,
                      threshold: float, positions: str, directions: str) -> bool:
    model = evaluator.model
    tensor = model.params[tensor_name]
    for pos in positions_for_dtype(tensor.dtype, positions):
        for direction in directions_for_dtype(tensor.dtype, directions):
            loc = BitLocation(ParameterRef(tensor_name, index), pos, direction)
            token = apply_flip(model.params, loc)
            if not token.applied:
                revert_flip(model.params, token)
                continue
            stats = evaluator.eval_flip(tensor_name, index)
            revert_flip(model.params, token)
            if rad(evaluator.pristine.accuracy, stats.accuracy) > threshold:
                return True
    return False
