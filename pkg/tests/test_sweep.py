"""Sweep engine: metric formula, toy-model oracle agreement, restoration,
determinism, heuristics, facet tables, and the targeted/transfer operations."""

import struct

import numpy as np
import pytest

from gracile.bitflip import FlipDirection, ParameterRef
from gracile.engine import Engine, accuracy
from gracile.formats import Dataset
from gracile.model import (LayerDescriptor, Model, ModelSpec, ParameterStore,
                           ParamTensor)
from gracile.sweep import (ConfigError, SweepConfig, attacker_bounds,
                           characterize, rad, run_sweep, stratified_sample,
                           targeted_search, transfer_overlap,
                           vulnerability_profile)

from conftest import small_conv_model, small_dataset


class TestRad:
    def test_no_damage(self):
        assert rad(0.9871, 0.9871) == 0.0

    def test_halved(self):
        assert rad(0.80, 0.40) == pytest.approx(0.5)

    def test_severe_drop_shape(self):
        # a drop to 0.08% of samples from 79.52% is a ~0.9992 relative drop
        assert rad(0.7952, 0.7952 * (1 - 0.9992)) == pytest.approx(0.9992)

    def test_negative_when_corruption_helps(self):
        assert rad(0.5, 0.6) < 0

    def test_zero_pristine_rejected(self):
        with pytest.raises(ValueError):
            rad(0.0, 0.1)


def scalar_toy_model():
    """One meaningful weight: scores = (w*x, 0*x + 0.9), labels all 1.

    With w = 0.5 and x in {0.8, 0.9, 1.0, 1.1} everything is classified 1.
    Raising w via exponent flips pushes score0 past 0.9; mantissa flips keep
    w < 0.75 and cannot reach the 0.9/1.1 ~ 0.818 boundary.
    """
    spec = ModelSpec(input_shape=(1,), class_count=2, layers=[
        LayerDescriptor(name="out", kind="fc", activation="softmax",
                        in_features=1, out_features=2)])
    store = ParameterStore([
        ParamTensor("out.weight", (2, 1), "f32", np.array([0.5, 0.0], np.float32)),
        ParamTensor("out.bias", (2,), "f32", np.array([0.0, 0.9], np.float32)),
    ])
    images = np.array([[0.8], [0.9], [1.0], [1.1]], np.float32)
    labels = np.array([1, 1, 1, 1], np.uint16)
    return Model(spec, store), Dataset(images, labels, 2)


def oracle_sweep(model, dataset):
    """Brute-force oracle: re-evaluate the whole model per flip via the
    public accuracy() path, with flips done by struct-level bit twiddling."""
    from gracile.bitflip import BitLocation, apply_flip, revert_flip

    results = {}
    acc0 = accuracy(model, dataset.images, dataset.labels)
    for name in model.spec.parameter_names():
        size = model.params[name].data.size
        for idx in range(size):
            for pos in range(1, 33):
                for direction in (FlipDirection.ZERO_TO_ONE, FlipDirection.ONE_TO_ZERO):
                    loc = BitLocation(ParameterRef(name, idx), pos, direction)
                    token = apply_flip(model.params, loc)
                    if token.applied:
                        acc = accuracy(model, dataset.images, dataset.labels)
                    else:
                        acc = acc0
                    revert_flip(model.params, token)
                    results[(name, idx, pos, direction.value)] = rad(acc0, acc)
    return results


class TestRunSweep:
    def test_toy_model_matches_brute_force_oracle(self):
        model, dataset = scalar_toy_model()
        expected = oracle_sweep(model, dataset)
        result = run_sweep(model, dataset, SweepConfig(workers=1))
        assert len(result.records) == len(expected)
        for rec in result.records:
            key = (result.tensor_names[rec["tensor"]], int(rec["index"]),
                   int(rec["position"]),
                   {0: "0to1", 1: "1to0"}[int(rec["direction"])])
            assert expected[key] == pytest.approx(rec["rad"], abs=1e-12), key

    def test_toy_weight_vulnerable_via_exponent_not_mantissa(self):
        model, dataset = scalar_toy_model()
        result = run_sweep(model, dataset, SweepConfig(workers=1))
        rec = result.records
        w0 = (rec["tensor"] == 0) & (rec["index"] == 0)
        damaging_positions = set(rec["position"][w0 & (rec["rad"] > 0.1)].tolist())
        assert damaging_positions  # the scaling weight is vulnerable
        assert damaging_positions <= set(range(24, 32))  # exponent bits only
        assert ("out.weight", 0) in result.vulnerable_params()

    def test_restoration_and_determinism(self, conv_model, toy_dataset):
        images, labels = toy_dataset
        dataset = Dataset(images, labels, 4)
        before = conv_model.params.state_bytes()
        r1 = run_sweep(conv_model, dataset, SweepConfig(workers=1))
        assert conv_model.params.state_bytes() == before
        r2 = run_sweep(conv_model, dataset, SweepConfig(workers=1))
        assert r1.records.tobytes() == r2.records.tobytes()

    def test_worker_count_invariance(self, conv_model, toy_dataset):
        images, labels = toy_dataset
        dataset = Dataset(images, labels, 4)
        r1 = run_sweep(conv_model, dataset, SweepConfig(positions="exp", workers=1))
        r2 = run_sweep(conv_model, dataset, SweepConfig(positions="exp", workers=2))
        assert r1.records.tobytes() == r2.records.tobytes()

    def test_sv_sampling_is_stratified_and_seeded(self):
        labels = np.array([0] * 30 + [1] * 10 + [2] * 20, np.uint16)
        idx = stratified_sample(labels, 0.1, seed=3)
        assert np.array_equal(idx, stratified_sample(labels, 0.1, seed=3))
        chosen = labels[idx]
        assert (chosen == 0).sum() == 3 and (chosen == 1).sum() == 1 and (chosen == 2).sum() == 2

    def test_sv_changes_eval_set(self, conv_model, toy_dataset):
        images, labels = toy_dataset
        dataset = Dataset(images, labels, 4)
        r = run_sweep(conv_model, dataset,
                      SweepConfig(positions="msb", sv_fraction=0.25, workers=1))
        assert r.eval_count < len(dataset)
        assert r.sv_indices is not None

    def test_sampled_params_with_repeats(self, conv_model, toy_dataset):
        images, labels = toy_dataset
        dataset = Dataset(images, labels, 4)
        cfg = SweepConfig(positions="msb", param_mode="sampled", sample_n=10,
                          repeats=3, workers=1)
        r = run_sweep(conv_model, dataset, cfg)
        assert r.repeats == 3 and r.params_per_repeat == 10
        assert len(r.per_repeat_ratios()) == 3

    def test_sample_larger_than_population_rejected(self, conv_model, toy_dataset):
        images, labels = toy_dataset
        dataset = Dataset(images, labels, 4)
        cfg = SweepConfig(param_mode="sampled", sample_n=10_000, workers=1)
        with pytest.raises(ConfigError):
            run_sweep(conv_model, dataset, cfg)

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            SweepConfig(positions="everything").validate()
        with pytest.raises(ConfigError):
            SweepConfig(sv_fraction=1.5).validate()
        with pytest.raises(ConfigError):
            SweepConfig(thresholds=(0.5, 0.1)).validate()

    def test_workers_env_fallback(self, monkeypatch):
        from gracile.sweep import resolve_workers
        monkeypatch.setenv("GRACILE_WORKERS", "3")
        assert resolve_workers(0) == 3
        assert resolve_workers(5) == 5  # explicit flag wins
        monkeypatch.delenv("GRACILE_WORKERS")
        assert resolve_workers(0) >= 1


class TestCharacterize:
    def test_single_position_bucket(self):
        model, dataset = scalar_toy_model()
        result = run_sweep(model, dataset,
                           SweepConfig(positions="msb", directions="0to1", workers=1))
        facets = characterize(result)
        assert set(facets["by_position"]) == {31}
        assert facets["by_direction"].keys() == {"0to1"}

    def test_sign_split_totals(self, conv_model, toy_dataset):
        images, labels = toy_dataset
        dataset = Dataset(images, labels, 4)
        result = run_sweep(conv_model, dataset, SweepConfig(positions="exp", workers=1))
        facets = characterize(result)
        total = sum(c["positive_total"] + c["negative_total"]
                    for c in facets["by_layer_sign"].values())
        assert total == conv_model.params.total_elements()


class TestProfileAndBounds:
    def test_profile_monotone_and_bounds(self, conv_model, toy_dataset):
        images, labels = toy_dataset
        dataset = Dataset(images, labels, 4)
        result = run_sweep(conv_model, dataset, SweepConfig(positions="exp", workers=1))
        grid = [0.0, 0.1, 0.5, 0.9, 1.1]
        profile = vulnerability_profile(result, grid)
        ratios = [r for _, r in profile]
        assert all(a >= b for a, b in zip(ratios, ratios[1:]))
        # every positive-rad param counts at 0.0; nothing exceeds rad 1
        assert profile[-1][1] == 0.0
        with pytest.raises(ValueError):
            vulnerability_profile(result, [0.5, 0.1])

    def test_attacker_bounds_formula(self, conv_model, toy_dataset):
        images, labels = toy_dataset
        dataset = Dataset(images, labels, 4)
        result = run_sweep(conv_model, dataset, SweepConfig(positions="msb", workers=1))
        bounds = attacker_bounds(result)
        pos31 = result.vulnerable_ratio(positions=(31,))
        assert bounds["surgical_blackbox"] == pytest.approx(pos31)
        assert bounds["blind_lower_bound"] == pytest.approx(pos31 / 32)
        assert bounds["surgical_whitebox"] in (0.0, 1.0)

    def test_published_bound_arithmetic(self):
        # the 42.1% top-bit ratio maps to a 1.32% blind lower bound
        assert 0.421 / 32 == pytest.approx(0.01316, abs=5e-6)


def targeted_toy():
    """Linear 2-feature model where exactly one exponent flip moves only the
    target sample across the class boundary within the damage budget."""
    spec = ModelSpec(input_shape=(2,), class_count=2, layers=[
        LayerDescriptor(name="out", kind="fc", activation="softmax",
                        in_features=2, out_features=2)])
    # weights rows: class0 = (1, 0), class1 = (w10, 1); biases 0
    w10 = np.float32(2.0 ** -5)  # 0.03125
    store = ParameterStore([
        ParamTensor("out.weight", (2, 2), "f32",
                    np.array([1.0, 0.0, w10, 1.0], np.float32)),
        ParamTensor("out.bias", (2,), "f32", np.zeros(2, np.float32)),
    ])
    model = Model(spec, store)
    images = [[0.875, 0.75]]          # the target: class 0 by a slim margin
    labels = [0]
    for _ in range(10):
        images.append([2.0, 0.5])     # robust class-0 samples
        labels.append(0)
    for _ in range(10):
        images.append([0.0, 10.0])    # robust class-1 samples
        labels.append(1)
    dataset = Dataset(np.array(images, np.float32), np.array(labels, np.uint16), 2)
    return model, dataset


def oracle_targeted(model, dataset, target_index, target_class, budget):
    """Exhaustive oracle over all exponent 0->1 flips via full re-evaluation."""
    from gracile.bitflip import BitLocation, apply_flip, revert_flip

    engine = Engine(model, backend="numpy")
    acc0 = accuracy(model, dataset.images, dataset.labels)
    hits = []
    for name in model.spec.parameter_names():
        for idx in range(model.params[name].data.size):
            for pos in range(24, 32):
                loc = BitLocation(ParameterRef(name, idx), pos, FlipDirection.ZERO_TO_ONE)
                token = apply_flip(model.params, loc)
                if token.applied:
                    scores = engine.forward(dataset.images[target_index:target_index + 1])
                    moved = (not np.isnan(scores).any()
                             and int(scores.argmax()) == target_class)
                    if moved:
                        acc = accuracy(model, dataset.images, dataset.labels)
                        if rad(acc0, acc) < budget:
                            hits.append((name, idx, pos))
                revert_flip(model.params, token)
    return hits


class TestTargetedSearch:
    def test_exactly_the_oracle_set(self):
        model, dataset = targeted_toy()
        expected = oracle_targeted(model, dataset, 0, 1, 0.05)
        got = targeted_search(model, dataset, 0, 1, rad_budget=0.05, sv_fraction=1.0)
        got_keys = [(l.param.tensor, l.param.index, l.position) for l in got]
        assert got_keys == expected
        assert got_keys == [("out.weight", 2, 26)]  # the engineered unique flip

    def test_precondition_pristine_prediction(self):
        model, dataset = targeted_toy()
        with pytest.raises(ValueError):
            targeted_search(model, dataset, 0, 0)  # already classified 0

    def test_empty_result_is_valid(self):
        model, dataset = targeted_toy()
        # an impossible budget returns no locations
        got = targeted_search(model, dataset, 0, 1, rad_budget=-1.0, sv_fraction=1.0)
        assert got == []


class TestTransferOverlap:
    def test_identical_student_full_overlap(self, conv_model, toy_dataset):
        images, labels = toy_dataset
        dataset = Dataset(images, labels, 4)
        student = conv_model.copy()
        out = transfer_overlap(conv_model, student, dataset, dataset,
                               [("c1", "c1"), ("f1", "f1")],
                               sample_per_layer=15, seed=0)
        for layer, stats in out.items():
            if stats["teacher_vulnerable"]:
                assert stats["overlap"] == 1.0

    def test_zero_vulnerable_layer_reports_none(self, toy_dataset):
        images, labels = toy_dataset
        # Non-negative inputs meeting strictly negative conv parameters: the
        # ReLU output is identically zero, and 0->1 flips only push the
        # pre-activations further negative, so no flip can ever matter.
        dataset = Dataset(np.abs(images), labels, 4)
        model = small_conv_model()
        model.params["c1.weight"].data[:] = -0.5
        model.params["c1.bias"].data[:] = -1.0
        out = transfer_overlap(model, model.copy(), dataset, dataset,
                               [("c1", "c1")], sample_per_layer=5, seed=0)
        assert out["c1"]["teacher_vulnerable"] == 0
        assert out["c1"]["overlap"] is None

    def test_shape_mismatch_rejected(self, conv_model, toy_dataset):
        images, labels = toy_dataset
        dataset = Dataset(images, labels, 4)
        other = small_conv_model()
        bigger = ParamTensor("f1.weight", (8, 27), "f32",
                             np.zeros(216, np.float32))
        spec = ModelSpec(input_shape=(1, 8, 8), class_count=4, layers=[
            LayerDescriptor(name="c1", kind="conv", activation="relu",
                            in_channels=1, out_channels=3, kernel=(3, 3)),
            LayerDescriptor(name="p1", kind="maxpool", pool=(2, 2), pool_stride=(2, 2)),
            LayerDescriptor(name="fl", kind="flatten"),
            LayerDescriptor(name="f1", kind="fc", activation="softmax",
                            in_features=27, out_features=8),
        ])
        weird = Model(ModelSpec(input_shape=(1, 8, 8), class_count=8, layers=spec.layers),
                      ParameterStore([other.params["c1.weight"].copy(),
                                      other.params["c1.bias"].copy(),
                                      bigger,
                                      ParamTensor("f1.bias", (8,), "f32",
                                                  np.zeros(8, np.float32))]))
        with pytest.raises(ValueError):
            transfer_overlap(conv_model, weird, dataset, dataset,
                             [("f1", "f1")], sample_per_layer=5)
