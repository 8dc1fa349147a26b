"""Rowhammer campaign simulation: flip-template databases, a page-aligned
victim memory layout, and the surgical / blind attack modes.

The surgical attacker scans hammerable rows for a flip whose (page offset,
bit, direction) lands on a vulnerable bit of some large page-aligned tensor;
memory massaging is abstracted as always succeeding once such a template is
found. The blind attacker hammers rows whose flips land at uniformly random
pages of the victim, corrupting parameters or (probabilistically) crashing
the process when they hit non-parameter memory.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bitflip import BitLocation, FlipDirection, ParameterRef, apply_flip
from .engine import CachedEvaluator
from .formats import Dataset
from .model import Model
from .sweep import DAMAGE_THRESHOLD, rad

PAGE_SIZE = 4096
SURGICAL_MIN_OBJECT_BYTES = 1 << 20  # only tensors this large are page-aligned
HAMMER_MS = 200                      # assumed wall time per hammered row

# Bernoulli probability that a flip landing outside parameter tensors kills
# the victim process. Calibrated so the default 12-setup x 25-experiment
# blind suite on the bundled fixture sees ~6 crashes in 300 experiments.
DEFAULT_CRASH_PROB = 4.0e-4

# Published 0->1 flip counts of the twelve DRAM setups the simulator mirrors;
# used to build synthetic databases with comparable densities.
DRAM_SETUP_FLIP_COUNTS = {
    "A_2": 21538, "E_2": 16320, "H_1": 10608, "G_1": 7851,
    "A_1": 4367, "F_1": 5927, "A_4": 5577, "I_1": 4781,
    "J_1": 4725, "E_1": 4175, "A_3": 1541, "C_1": 1365,
}


class TemplateDBError(Exception):
    """Malformed flip-template database file."""


@dataclass(frozen=True)
class TemplateFlip:
    offset: int        # byte offset within the 4096-byte page
    bit: int           # bit index 0..7 within the byte
    one_to_zero: bool  # False: 0->1, True: 1->0

    def __post_init__(self):
        if not 0 <= self.offset < PAGE_SIZE:
            raise TemplateDBError(f"flip offset {self.offset} outside page")
        if not 0 <= self.bit <= 7:
            raise TemplateDBError(f"flip bit {self.bit} outside byte")

    @property
    def direction(self) -> FlipDirection:
        return FlipDirection.ONE_TO_ZERO if self.one_to_zero else FlipDirection.ZERO_TO_ONE


@dataclass
class HammerRow:
    row_id: int
    flips: tuple[TemplateFlip, ...]


@dataclass
class FlipTemplateDB:
    """Per-DRAM-setup list of hammerable rows and their induced flips."""

    name: str
    rows: list[HammerRow]

    def flip_count(self, direction: FlipDirection | None = None) -> int:
        if direction is None:
            return sum(len(r.flips) for r in self.rows)
        want = direction is FlipDirection.ONE_TO_ZERO
        return sum(1 for r in self.rows for f in r.flips if f.one_to_zero == want)


_DIR_TOKENS = {"0to1": False, "1to0": True}
_TOKEN_OF = {False: "0to1", True: "1to0"}


def save_template_db(db: FlipTemplateDB, path) -> None:
    with open(path, "w") as fh:
        fh.write(f"# setup={db.name}\n")
        for row in db.rows:
            flips = ",".join(f"{f.offset}:{f.bit}:{_TOKEN_OF[f.one_to_zero]}" for f in row.flips)
            fh.write(f"row={row.row_id} flips={flips}\n")


def load_template_db(path, name: str | None = None) -> FlipTemplateDB:
    rows = []
    db_name = name or "unnamed"
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                if "setup=" in line and name is None:
                    db_name = line.split("setup=", 1)[1].strip()
                continue
            try:
                row_part, flips_part = line.split(None, 1)
                if not row_part.startswith("row=") or not flips_part.startswith("flips="):
                    raise ValueError("expected 'row=<id> flips=<list>'")
                row_id = int(row_part[4:])
                body = flips_part[6:].strip()
                flips = []
                if body:
                    for item in body.split(","):
                        offset_s, bit_s, dir_s = item.split(":")
                        if dir_s not in _DIR_TOKENS:
                            raise ValueError(f"unknown direction {dir_s!r}")
                        flips.append(TemplateFlip(int(offset_s), int(bit_s),
                                                  _DIR_TOKENS[dir_s]))
                rows.append(HammerRow(row_id, tuple(flips)))
            except (ValueError, TemplateDBError) as exc:
                raise TemplateDBError(f"{path}: line {lineno}: {exc}") from exc
    return FlipTemplateDB(db_name, rows)


def synth_template_db(name: str, n_rows: int, total_0to1_flips: int,
                      seed: int, one_to_zero_ratio: float = 0.1) -> FlipTemplateDB:
    """Synthetic database with an exact 0->1 flip count spread uniformly over
    rows, offsets and bits, plus a proportional share of 1->0 flips."""
    rng = np.random.default_rng(seed)
    flips_per_row: dict[int, list[TemplateFlip]] = {i: [] for i in range(n_rows)}
    n_1to0 = int(round(total_0to1_flips * one_to_zero_ratio))
    for count, one_to_zero in ((total_0to1_flips, False), (n_1to0, True)):
        rows = rng.integers(0, n_rows, size=count)
        offsets = rng.integers(0, PAGE_SIZE, size=count)
        bits = rng.integers(0, 8, size=count)
        for r, o, b in zip(rows.tolist(), offsets.tolist(), bits.tolist()):
            flips_per_row[r].append(TemplateFlip(o, b, one_to_zero))
    return FlipTemplateDB(name, [HammerRow(i, tuple(flips_per_row[i]))
                                 for i in range(n_rows)])


def dram_setup_suite(seed: int = 0, rows_per_setup: int = 16384) -> dict[str, FlipTemplateDB]:
    """Twelve synthetic DRAM setups whose 0->1 flip densities match the
    published per-setup counts."""
    suite = {}
    for i, (name, count) in enumerate(DRAM_SETUP_FLIP_COUNTS.items()):
        suite[name] = synth_template_db(name, rows_per_setup, count, seed=seed * 1000 + i)
    return suite


@dataclass
class Region:
    kind: str            # "param" | "code"
    tensor: str | None
    start: int           # absolute byte address within the layout
    nbytes: int

    @property
    def end(self) -> int:
        return self.start + self.nbytes


@dataclass
class MemoryLayout:
    """Victim address space: parameter tensors plus a code/other region.

    Tensors at or above ``min_object_bytes`` start page-aligned (offset 0),
    the surgical attack precondition. Smaller tensors start on a fresh page
    at a seeded random 4-byte slot, page-unaligned on purpose.
    """

    regions: list[Region]
    total_pages: int
    min_object_bytes: int
    seed: int

    @classmethod
    def build(cls, model: Model, code_bytes: int | None = None,
              min_object_bytes: int = SURGICAL_MIN_OBJECT_BYTES,
              seed: int = 0) -> "MemoryLayout":
        rng = np.random.default_rng(seed)
        regions = []
        addr = 0
        param_bytes = 0
        for name in model.spec.parameter_names():
            tensor = model.params[name]
            param_bytes += tensor.nbytes
            if tensor.nbytes >= min_object_bytes:
                offset = 0
            else:
                offset = int(rng.integers(0, PAGE_SIZE // 4)) * 4
            regions.append(Region("param", name, addr + offset, tensor.nbytes))
            addr += _pages(offset + tensor.nbytes) * PAGE_SIZE
        if code_bytes is None:
            # Model parameters dominate the victim footprint; mirror their size.
            code_bytes = max(param_bytes, PAGE_SIZE)
        regions.append(Region("code", None, addr, code_bytes))
        addr += _pages(code_bytes) * PAGE_SIZE
        return cls(regions, _pages(addr), min_object_bytes, seed)

    def element_width(self, model: Model, tensor: str) -> int:
        return 1 if model.params[tensor].dtype != "f32" else 4

    def map_flip(self, model: Model, page_index: int, offset: int, bit: int,
                 one_to_zero: bool):
        """Resolve a DRAM flip to ('param', BitLocation), ('code', None) or
        ('gap', None).

        Little-endian parameter storage: byte k of a float32 word carries the
        1-based value positions 8k+1..8k+8, so position = 8*(byte % 4) + bit + 1.
        """
        if not 0 <= page_index < self.total_pages:
            raise ValueError(f"page {page_index} outside layout")
        address = page_index * PAGE_SIZE + offset
        for region in self.regions:
            if not region.start <= address < region.end:
                continue
            if region.kind == "code":
                return ("code", None)
            tensor = model.params[region.tensor]
            byte_in_tensor = address - region.start
            direction = (FlipDirection.ONE_TO_ZERO if one_to_zero
                         else FlipDirection.ZERO_TO_ONE)
            if tensor.dtype == "f32":
                element = byte_in_tensor // 4
                position = 8 * (byte_in_tensor % 4) + bit + 1
            elif tensor.dtype == "u8-quant":
                element = byte_in_tensor
                position = bit + 1
            else:  # i8-binary: only the stored sign bit is meaningful
                if bit != 7:
                    return ("gap", None)
                element = byte_in_tensor
                position = 1
                direction = FlipDirection.UNCONDITIONAL
            return ("param", BitLocation(ParameterRef(region.tensor, element),
                                         position, direction))
        return ("gap", None)

    def vulnerable_templates(self, model: Model,
                             vulnerable_bits: list[BitLocation]) -> set[tuple[int, int, bool]]:
        """(page offset, bit, one_to_zero) triples that would corrupt a
        vulnerable bit of a page-aligned (>= min_object_bytes) tensor."""
        by_tensor: dict[str, Region] = {r.tensor: r for r in self.regions
                                        if r.kind == "param"}
        templates = set()
        for loc in vulnerable_bits:
            region = by_tensor.get(loc.param.tensor)
            if region is None or region.nbytes < self.min_object_bytes:
                continue
            width = self.element_width(model, loc.param.tensor)
            byte_in_tensor = loc.param.index * width + (loc.position - 1) // 8
            offset = byte_in_tensor % PAGE_SIZE
            bit = (loc.position - 1) % 8
            one_to_zero = loc.direction is FlipDirection.ONE_TO_ZERO
            templates.add((offset, bit, one_to_zero))
        return templates


def _pages(nbytes: int) -> int:
    return (nbytes + PAGE_SIZE - 1) // PAGE_SIZE


@dataclass(frozen=True)
class SurgicalResult:
    setup: str
    attempts: int
    exhausted: bool
    row_id: int | None
    template: tuple[int, int, bool] | None

    @property
    def wall_time_ms(self) -> int:
        return self.attempts * HAMMER_MS


def surgical_search(db: FlipTemplateDB, layout: MemoryLayout, model: Model,
                    vulnerable_bits: list[BitLocation], seed: int = 0) -> SurgicalResult:
    """Hammer rows in a seeded random order until one matches a vulnerable
    template; the attempt count is the search cost of the surgical attack."""
    if not vulnerable_bits:
        raise ValueError("surgical search needs a nonempty vulnerable-bit set")
    if not db.rows:
        raise ValueError(f"template database {db.name!r} has no rows")
    templates = layout.vulnerable_templates(model, vulnerable_bits)
    order = np.random.default_rng(seed).permutation(len(db.rows))
    for attempt, row_pos in enumerate(order.tolist(), start=1):
        row = db.rows[row_pos]
        for flip in row.flips:
            key = (flip.offset, flip.bit, flip.one_to_zero)
            if key in templates:
                return SurgicalResult(db.name, attempt, False, row.row_id, key)
    return SurgicalResult(db.name, len(db.rows), True, None, None)


def surgical_suite(dbs: dict[str, FlipTemplateDB], layout: MemoryLayout, model: Model,
                   vulnerable_bits: list[BitLocation], seed: int = 0) -> dict:
    """Min/median/max attempts to the first vulnerable template across setups."""
    results = {name: surgical_search(db, layout, model, vulnerable_bits, seed=seed)
               for name, db in sorted(dbs.items())}
    attempts = sorted(r.attempts for r in results.values() if not r.exhausted)
    summary = {
        "per_setup": {name: {"attempts": r.attempts, "exhausted": r.exhausted,
                             "wall_time_ms": r.wall_time_ms}
                      for name, r in results.items()},
        "matched_setups": len(attempts),
        "min": attempts[0] if attempts else None,
        "median": (int(np.median(attempts)) if attempts else None),
        "max": attempts[-1] if attempts else None,
    }
    return summary


@dataclass(frozen=True)
class CampaignConfig:
    experiments: int = 25
    max_attempts: int = 300
    seed: int = 0
    crash_prob: float = DEFAULT_CRASH_PROB
    rad_threshold: float = DAMAGE_THRESHOLD
    top_k: int | None = 5

    def validate(self) -> None:
        if self.experiments < 1 or self.max_attempts < 1:
            raise ValueError("experiments and max_attempts must be positive")
        if not 0 <= self.crash_prob <= 1:
            raise ValueError("crash_prob must be a probability")


@dataclass
class AttemptRecord:
    experiment: int
    attempt: int
    row_id: int
    landed: list[tuple]          # (kind, page, offset, bit, dir, applied, tensor, index, position)
    outcome: str                 # "" for non-terminal attempts


@dataclass
class ExperimentResult:
    experiment: int
    outcome: str                 # corrupted | crash | timeout
    attempts: int
    flips_landed: int
    flips_applied: int
    rad_top1: float | None
    rad_topk: float | None
    applied_locations: list[BitLocation] = field(default_factory=list)


@dataclass
class CampaignResult:
    setup: str
    config: CampaignConfig
    pristine_accuracy: float
    experiments: list[ExperimentResult]
    attempts_log: list[AttemptRecord]

    def summary(self) -> dict:
        outcomes = [e.outcome for e in self.experiments]
        rads = [e.rad_top1 for e in self.experiments if e.outcome == "corrupted"]
        return {
            "setup": self.setup,
            "experiments": len(self.experiments),
            "corrupted": outcomes.count("corrupted"),
            "crashed": outcomes.count("crash"),
            "timed_out": outcomes.count("timeout"),
            "median_rad_top1": float(np.median(rads)) if rads else None,
            "rad_top1": rads,
            "rad_topk": [e.rad_topk for e in self.experiments if e.outcome == "corrupted"],
            "attempts": [e.attempts for e in self.experiments],
            "flips_applied": [e.flips_applied for e in self.experiments],
        }


def blind_campaign(db: FlipTemplateDB, layout: MemoryLayout, model: Model,
                   dataset: Dataset, config: CampaignConfig) -> CampaignResult:
    """Blind attack: seeded experiments hammer random rows; each landed flip
    hits a uniformly random page of the victim layout.

    Parameter hits mutate a working copy (evaluated after every attempt that
    applied at least one flip); non-parameter hits crash the process with the
    configured probability; surviving to the attempt cap times out.
    """
    config.validate()
    if not db.rows:
        raise ValueError(f"template database {db.name!r} has no rows")
    from .sweep import _single_blas_thread

    experiments = []
    attempts_log = []
    pristine_acc = None
    with _single_blas_thread():
        for exp in range(config.experiments):
            rng = np.random.default_rng([config.seed, exp])
            working = model.copy()
            evaluator = CachedEvaluator(working, dataset.images, dataset.labels,
                                        top_k=config.top_k)
            pristine = evaluator.pristine
            pristine_acc = pristine.accuracy
            min_layer = evaluator.n_layers
            outcome = "timeout"
            rad1 = radk = None
            flips_landed = flips_applied = 0
            applied_locs: list[BitLocation] = []
            attempt = 0
            for attempt in range(1, config.max_attempts + 1):
                row = db.rows[int(rng.integers(0, len(db.rows)))]
                landed = []
                crash = False
                applied_now = False
                for flip in row.flips:
                    page = int(rng.integers(0, layout.total_pages))
                    kind, loc = layout.map_flip(working, page, flip.offset,
                                                flip.bit, flip.one_to_zero)
                    flips_landed += 1
                    applied = False
                    if kind == "param":
                        token = apply_flip(working.params, loc)
                        applied = token.applied
                        if applied:
                            flips_applied += 1
                            applied_now = True
                            applied_locs.append(loc)
                            min_layer = min(min_layer,
                                            working.layer_of_tensor(loc.param.tensor))
                    elif kind == "code":
                        if rng.random() < config.crash_prob:
                            crash = True
                    landed.append((kind, page, flip.offset, flip.bit,
                                   "1to0" if flip.one_to_zero else "0to1", applied,
                                   loc.param.tensor if loc else None,
                                   loc.param.index if loc else None,
                                   loc.position if loc else None))
                attempts_log.append(AttemptRecord(exp, attempt, row.row_id, landed, ""))
                if crash:
                    outcome = "crash"
                    break
                if applied_now:
                    stats = evaluator.eval_from(min_layer)
                    rad1 = rad(pristine.accuracy, stats.accuracy)
                    if config.top_k is not None:
                        radk = rad(pristine.top_k_accuracy, stats.top_k_accuracy)
                    if rad1 > config.rad_threshold:
                        outcome = "corrupted"
                        break
            if outcome != "corrupted":
                rad1 = radk = None
            experiments.append(ExperimentResult(
                experiment=exp, outcome=outcome, attempts=attempt,
                flips_landed=flips_landed, flips_applied=flips_applied,
                rad_top1=rad1, rad_topk=radk, applied_locations=applied_locs))
            if attempts_log:
                attempts_log[-1].outcome = outcome
    return CampaignResult(db.name, config, pristine_acc, experiments, attempts_log)
