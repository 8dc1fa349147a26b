"""Acceptance battery.

Each test covers one numbered criterion and reports a PASS line through the
terminal-summary hook. The compute-heavy sweeps are shared session fixtures;
expect roughly an hour of wall time on 8 cores (scaling with worker count,
see README). Regression values marked "pinned" were frozen from the first
verified run on the committed fixtures via tools/pin_acceptance.py.
"""

import hashlib
import os
import struct
import time

import numpy as np
import pytest

import acceptance_lib as lib
from gracile.bitflip import FlipDirection, flip_f32
from gracile.engine import Engine, accuracy
from gracile.formats import Dataset
from gracile.mitigate import calibrate_clamp, quantize8, binarize, substitute_activation
from gracile.sweep import SweepConfig, run_sweep, targeted_search
from gracile.rowhammer import DEFAULT_CRASH_PROB

from conftest import ACCEPTANCE_LINES

# ---------------------------------------------------------------------------
# Regression values pinned from the first oracle-verified run on the
# committed fixtures (see tools/pin_acceptance.py). PIN_PLACEHOLDER
# ---------------------------------------------------------------------------

PUBLISHED_B_RATIO = 0.5024          # reference instance, 21,840-parameter net
PUBLISHED_BLIND_BOUND = 0.0132      # 42.1% / 32


def note(criterion: int, text: str) -> None:
    ACCEPTANCE_LINES.append(f"[PASS] criterion {criterion:2d}: {text}")


@pytest.fixture(scope="session")
def workers():
    return lib.acceptance_workers()


@pytest.fixture(scope="session")
def val_slice():
    return lib.val1k()


@pytest.fixture(scope="session")
def b_model():
    return lib.fixture_model("mnist_b")


@pytest.fixture(scope="session")
def b_exhaustive(b_model, val_slice, workers):
    started = time.time()
    result = lib.run_exhaustive(b_model, val_slice, workers)
    result.elapsed_s = time.time() - started
    return result


@pytest.fixture(scope="session")
def l5_model():
    return lib.fixture_model("mnist_l5")


class TestCriterion1BitflipExactness:
    def test_anchor_and_xor_oracle_equivalence(self):
        from gracile.bitflip import flip_bits_u32

        value, applied = flip_f32(0.15625, 31, FlipDirection.ZERO_TO_ONE)
        assert applied and value == np.float32(1.25) * np.float32(2.0) ** 125

        started = time.time()
        rng = np.random.default_rng(123)
        n = 1_000_000
        bits = rng.integers(0, 1 << 32, size=n, dtype=np.uint64).astype(np.uint32)
        positions = rng.integers(1, 33, size=n).astype(np.uint8)
        # independent oracle: reinterpret bits, XOR the mask, reinterpret back
        expected = (bits ^ (np.uint32(1) << (positions - 1).astype(np.uint32))).tolist()
        mismatches = 0
        uncond = FlipDirection.UNCONDITIONAL
        for b, p, want in zip(bits.tolist(), positions.tolist(), expected):
            got, applied = flip_bits_u32(b, p, uncond)
            if not applied or got != want:
                mismatches += 1
        # the value-level wrapper agrees with the bit-level path on a sample
        values = bits.view(np.float32)
        for i in rng.integers(0, n, size=5_000).tolist():
            got, _ = flip_f32(values[i], int(positions[i]), uncond)
            if int(np.float32(got).view(np.uint32)) != expected[i]:
                mismatches += 1
        elapsed = time.time() - started
        assert mismatches == 0
        assert elapsed < 5.0, f"oracle equivalence took {elapsed:.2f}s"
        note(1, f"top-bit anchor exact; XOR oracle: 0 mismatches over {n} pairs "
                f"in {elapsed:.2f}s")


class TestCriterion2ExhaustiveSweep:
    def test_ratio_band_and_pinned_value(self, b_exhaustive, workers):
        rec = b_exhaustive.records
        assert len(rec) == 21840 * 32 * 2
        budget = 7200.0 * (8 / workers)
        assert b_exhaustive.elapsed_s < budget, (
            f"{b_exhaustive.elapsed_s:.0f}s exceeds the {budget:.0f}s budget "
            f"({workers} workers)")
        ratio = b_exhaustive.vulnerable_ratio()
        assert abs(ratio - PUBLISHED_B_RATIO) <= 0.05
        vulnerable = len(b_exhaustive.vulnerable_params())
        assert vulnerable == PINNED["b_vulnerable_params"]
        assert b_exhaustive.pristine_accuracy == PINNED["b_pristine_acc_1k"]
        note(2, f"exhaustive ratio {ratio:.4f} (band {PUBLISHED_B_RATIO}±0.05), "
                f"{vulnerable} vulnerable params, {b_exhaustive.elapsed_s:.0f}s "
                f"on {workers} workers")


class TestCriterion3DirectionAsymmetry:
    def test_no_one_to_zero_damage(self, b_exhaustive):
        rec = b_exhaustive.records
        one_to_zero_damaging = int(((rec["direction"] == 1) & (rec["rad"] > 0.1)).sum())
        assert one_to_zero_damaging == 0
        # consequence: restricting the sweep to 0->1 yields the same
        # vulnerable set as testing both directions
        damaging = rec["rad"] > 0.1
        both = {(int(r["tensor"]), int(r["index"])) for r in rec[damaging]}
        only01 = {(int(r["tensor"]), int(r["index"]))
                  for r in rec[damaging & (rec["direction"] == 0)]}
        assert both == only01
        note(3, "zero damaging 1->0 flips; 0->1-only vulnerable set equals "
                "the both-directions set")


class TestCriterion4BitPositionConcentration:
    def test_exponent_bits_dominate(self, b_exhaustive):
        rec = b_exhaustive.records
        damaging = rec[rec["rad"] > 0.1]
        exp_share = float(np.isin(damaging["position"], range(24, 32)).mean())
        by_pos = {int(p): int((damaging["position"] == p).sum())
                  for p in np.unique(damaging["position"])}
        top_bucket = max(by_pos, key=by_pos.get)
        assert exp_share >= 0.95
        assert top_bucket == 31
        # sign-bit flips on inner-layer parameters stay below the threshold
        inner = [i for i, name in enumerate(b_exhaustive.layer_names)
                 if name in ("conv2", "fc1")]
        sign_inner = rec[(rec["position"] == 32) & np.isin(rec["layer"], inner)]
        assert float(sign_inner["rad"].max()) <= 0.1
        note(4, f"{exp_share:.1%} of damaging flips in exponent bits; "
                f"position-31 bucket largest ({by_pos[31]}); inner-layer "
                f"sign flips never exceed the threshold")


class TestCriterion5HeuristicSoundness:
    def test_exponent_and_msb_recovery(self, b_exhaustive, b_model, val_slice):
        full = b_exhaustive.vulnerable_params()
        uniq, vul = b_exhaustive.vulnerable_mask_by_param(positions=tuple(range(24, 32)))
        exp_set = {(b_exhaustive.tensor_names[t], i)
                   for (_, t, i), v in zip(uniq.tolist(), vul.tolist()) if v}
        uniq, vul = b_exhaustive.vulnerable_mask_by_param(positions=(31,))
        msb_set = {(b_exhaustive.tensor_names[t], i)
                   for (_, t, i), v in zip(uniq.tolist(), vul.tolist()) if v}
        exp_recall = len(exp_set & full) / len(full)
        msb_recall = len(msb_set & full) / len(full)
        assert exp_recall >= 0.95
        assert msb_recall >= 0.80
        # an actual restricted sweep reproduces the record-filter view exactly
        config = SweepConfig(positions="exp", directions="both",
                             param_mode="sampled", sample_n=400, sample_seed=9,
                             repeats=1, workers=1)
        small = run_sweep(b_model, val_slice, config)
        sampled = {(small.tensor_names[t], int(i))
                   for t, i in zip(small.records["tensor"], small.records["index"])}
        small_vulnerable = small.vulnerable_params()
        assert small_vulnerable == {p for p in exp_set if p in sampled}
        note(5, f"exponent-only recovers {exp_recall:.1%}, "
                f"top-bit-only recovers {msb_recall:.1%} of the exhaustive set")


class TestCriterion6SampledParameterStability:
    def test_five_sample_spread(self, l5_model, val_slice, workers):
        result = lib.run_l5_sp(l5_model, val_slice, workers)
        ratios = result.per_repeat_ratios()
        spread = max(ratios) - min(ratios)
        assert len(ratios) == 5
        assert spread <= 0.03
        assert ratios == pytest.approx(PINNED["l5_sp_ratios"], abs=1e-12)
        from gracile.sweep import characterize, vulnerability_profile
        profile = dict(vulnerability_profile(result, lib.PROFILE_GRID))
        assert profile[0.5] == pytest.approx(PINNED["l5_profile_at_0_5"], abs=1e-12)
        # inner layers: vulnerable negative parameters are strictly rarer than
        # positive ones (the rectifier zeroes negative-side spikes)
        facets = characterize(result)
        for layer in ("conv2", "conv3", "fc1"):
            cell = facets["by_layer_sign"][layer]
            assert cell["negative"] < cell["positive"], layer
        note(6, f"five 2,000-parameter samples: ratios spread {spread*100:.2f}pp; "
                f"ratio@0.5 threshold {profile[0.5]:.3f}; inner-layer negatives "
                f"strictly less vulnerable than positives")


class TestCriterion7PreluAmplification:
    def test_prelu_ratio_amplifies(self, b_exhaustive, val_slice, workers):
        prelu = lib.run_exhaustive(lib.fixture_model("mnist_b_prelu"), val_slice, workers)
        ratio_b = b_exhaustive.vulnerable_ratio()
        ratio_p = prelu.vulnerable_ratio()
        assert ratio_p >= 1.7 * ratio_b
        assert len(prelu.vulnerable_params()) == PINNED["b_prelu_vulnerable_params"]
        note(7, f"negative-passing activation ratio {ratio_p:.4f} vs base "
                f"{ratio_b:.4f} ({ratio_p / ratio_b:.2f}x)")


class TestCriterion8ClampingMitigation:
    def test_relu6_substitution_and_clamp_calibration(self, b_model, val_slice, workers):
        hardened = substitute_activation(b_model, "relu6")
        result = lib.run_exhaustive(hardened, val_slice, workers)
        ratio = result.vulnerable_ratio()
        assert ratio < 0.05
        assert len(result.vulnerable_params()) == PINNED["b_relu6_vulnerable_params"]
        bounds = calibrate_clamp(b_model, val_slice.images)
        clamped = substitute_activation(b_model, "reluclamp", clamp_bounds=bounds)
        acc_before = accuracy(b_model, val_slice.images, val_slice.labels)
        acc_after = accuracy(clamped, val_slice.images, val_slice.labels)
        assert acc_after == acc_before
        note(8, f"clamped-activation ratio {ratio:.4f} (<5%); calibrated clamp "
                f"keeps calibration accuracy at {acc_after:.4f} exactly")


class TestCriterion9LowPrecisionMitigation:
    def test_quantized_and_binarized(self, l5_model, val_slice, workers):
        quant = quantize8(l5_model)
        acc_drop = (accuracy(l5_model, val_slice.images, val_slice.labels)
                    - accuracy(quant, val_slice.images, val_slice.labels))
        assert acc_drop <= 0.01
        q_result = run_sweep(quant, val_slice,
                             SweepConfig(positions="all", directions="both",
                                         workers=workers))
        q_ratio = q_result.vulnerable_ratio()
        assert q_ratio <= 0.01
        assert len(q_result.vulnerable_params()) == PINNED["l5_quant_vulnerable_params"]

        binary = binarize(l5_model)
        b_result = run_sweep(binary, val_slice,
                             SweepConfig(positions="all", directions="both",
                                         workers=workers))
        b_ratio = b_result.vulnerable_ratio()
        assert b_ratio <= 0.02
        layers = {tensor.rsplit(".", 1)[0]
                  for tensor, _ in b_result.vulnerable_params()}
        assert layers <= {"conv1", "fc2"}, f"vulnerable outside first conv/final: {layers}"
        assert len(b_result.vulnerable_params()) == PINNED["l5_binary_vulnerable_params"]
        note(9, f"8-bit ratio {q_ratio:.4f} (<=1%), accuracy drop {acc_drop*100:.2f}pp; "
                f"sign-parameter ratio {b_ratio:.4f} (<=2%) confined to {sorted(layers)}")


class TestCriterion10SurgicalSimulator:
    def test_geometric_means_and_determinism(self):
        for p in (0.25, 0.015, 0.002):
            mean = lib.surgical_mean_attempts(p)
            assert abs(mean - 1 / p) <= 0.10 / p, f"p={p}: mean {mean:.1f}"
        from gracile.rowhammer import MemoryLayout, surgical_search
        from gracile.bitflip import BitLocation, ParameterRef
        model = lib.surgical_probe_model()
        layout = MemoryLayout.build(model, seed=0)
        bits = [BitLocation(ParameterRef("f.weight", 0), 31, FlipDirection.ZERO_TO_ONE)]
        db = lib.single_template_surgical_db(20000, 0.015)
        a = surgical_search(db, layout, model, bits, seed=77)
        b = surgical_search(db, layout, model, bits, seed=77)
        assert a.attempts == b.attempts
        note(10, "mean attempts within 10% of 1/p for p in {0.25, 0.015, 0.002}; "
                 "seeded searches deterministic")


class TestCriterion11BlindSimulator:
    def test_setup_suite_outcomes(self, b_model, val_slice):
        results = lib.blind_suite(b_model, val_slice, seed=0)
        summaries = {name: r.summary() for name, r in results.items()}
        a2 = summaries["A_2"]
        c1 = summaries["C_1"]
        assert a2["corrupted"] >= 20
        assert a2["median_rad_top1"] > 0.1
        assert c1["corrupted"] <= 5
        assert c1["timed_out"] > c1["corrupted"] + c1["crashed"]
        crashes = sum(s["crashed"] for s in summaries.values())
        assert 0 <= crashes <= 15
        for name, pin in PINNED["blind"].items():
            got = summaries[name]
            assert (got["corrupted"], got["crashed"], got["timed_out"]) == tuple(pin), name
        note(11, f"dense setup {a2['corrupted']}/25 corrupted, sparse setup "
                 f"{c1['corrupted']}/25 with {c1['timed_out']} timeouts; "
                 f"{crashes} crashes across 300 experiments "
                 f"(crash model p={DEFAULT_CRASH_PROB})")


class TestCriterion12RestorationAndParallelDeterminism:
    def test_model_restored_and_hash_stable(self, b_model, val_slice, workers):
        from gracile.reports import report_dict

        before = b_model.params.state_bytes()
        config = SweepConfig(positions="exp", directions="0to1",
                             param_mode="sampled", sample_n=3000, sample_seed=5,
                             repeats=1, workers=1)
        r1 = run_sweep(b_model, val_slice, config)
        assert b_model.params.state_bytes() == before
        multi = SweepConfig(positions="exp", directions="0to1",
                            param_mode="sampled", sample_n=3000, sample_seed=5,
                            repeats=1, workers=max(2, workers))
        r2 = run_sweep(b_model, val_slice, multi)
        assert b_model.params.state_bytes() == before
        h1 = hashlib.sha256(r1.records.tobytes()).hexdigest()
        h2 = hashlib.sha256(r2.records.tobytes()).hexdigest()
        assert h1 == h2
        import json
        j1 = json.dumps(report_dict(r1), sort_keys=True)
        j2 = json.dumps(report_dict(r2), sort_keys=True)
        assert hashlib.sha256(j1.encode()).hexdigest() == \
               hashlib.sha256(j2.encode()).hexdigest()
        note(12, f"post-sweep bytes identical; report hash {h1[:12]}... equal "
                 f"for 1 vs {max(2, workers)} workers")


class TestCriterion13TargetedSearch:
    def test_toy_exactness_and_fixture_pair(self, b_model, val_slice):
        from test_sweep import oracle_targeted, targeted_toy

        toy_model, toy_data = targeted_toy()
        expected = oracle_targeted(toy_model, toy_data, 0, 1, 0.05)
        got = targeted_search(toy_model, toy_data, 0, 1, rad_budget=0.05,
                              sv_fraction=1.0)
        assert [(l.param.tensor, l.param.index, l.position) for l in got] == expected

        engine = Engine(b_model, backend="numpy")
        pred = engine.forward(val_slice.images).argmax(axis=1)
        candidates = np.nonzero((val_slice.labels == 4) & (pred == val_slice.labels))[0]
        target_index = int(candidates[0])
        locations = targeted_search(b_model, val_slice, target_index, 6,
                                    rad_budget=0.05)
        assert len(locations) > 0
        assert len(locations) == PINNED["targeted_4_6_count"]
        note(13, f"toy search equals the exhaustive oracle; fixture 4->6 pair "
                 f"yields {len(locations)} locations under the 0.05 budget")
