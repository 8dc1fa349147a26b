"""Rowhammer simulation: template DB parsing, layout/bit mapping (cross-checked
against the value-level flip function), surgical search statistics, and blind
campaign mechanics."""

import numpy as np
import pytest

from gracile.bitflip import (BitLocation, FlipDirection, ParameterRef,
                             flip_f32)
from gracile.formats import Dataset
from gracile.model import (LayerDescriptor, Model, ModelSpec, ParameterStore,
                           ParamTensor)
from gracile.rowhammer import (CampaignConfig, FlipTemplateDB, HammerRow,
                               MemoryLayout, TemplateDBError, TemplateFlip,
                               blind_campaign, dram_setup_suite,
                               load_template_db, save_template_db,
                               surgical_search, surgical_suite,
                               synth_template_db)

from conftest import small_conv_model, small_dataset


class TestTemplateDB:
    def test_parse_two_row_sample(self, tmp_path):
        path = tmp_path / "sample.db"
        path.write_text("# setup=T_1\n"
                        "row=12 flips=100:3:0to1,200:7:1to0\n"
                        "row=99 flips=\n")
        db = load_template_db(path)
        assert db.name == "T_1"
        assert len(db.rows) == 2
        assert db.rows[0].flips == (TemplateFlip(100, 3, False), TemplateFlip(200, 7, True))
        assert db.rows[1].flips == ()
        assert db.flip_count(FlipDirection.ZERO_TO_ONE) == 1
        assert db.flip_count() == 2

    def test_offset_out_of_page_rejected_with_line(self, tmp_path):
        path = tmp_path / "bad.db"
        path.write_text("row=1 flips=4096:0:0to1\n")
        with pytest.raises(TemplateDBError) as err:
            load_template_db(path)
        assert "line 1" in str(err.value)

    def test_malformed_direction_rejected(self, tmp_path):
        path = tmp_path / "bad.db"
        path.write_text("row=1 flips=10:0:sideways\n")
        with pytest.raises(TemplateDBError):
            load_template_db(path)

    def test_generator_round_trips(self, tmp_path):
        db = synth_template_db("gen", n_rows=64, total_0to1_flips=150, seed=5)
        assert db.flip_count(FlipDirection.ZERO_TO_ONE) == 150
        path = tmp_path / "gen.db"
        save_template_db(db, path)
        loaded = load_template_db(path)
        assert loaded.name == "gen"
        assert loaded.rows == db.rows

    def test_setup_suite_density_ordering(self):
        suite = dram_setup_suite(seed=1, rows_per_setup=512)
        counts = {name: db.flip_count(FlipDirection.ZERO_TO_ONE)
                  for name, db in suite.items()}
        assert counts["A_2"] > counts["E_2"] > counts["C_1"]
        assert len(suite) == 12


def big_tensor_model(elements: int = 300_000):
    """One conv layer plus a >=1MB dense tensor so surgical targeting applies."""
    out_features = elements // 100
    spec = ModelSpec(input_shape=(100,), class_count=out_features, layers=[
        LayerDescriptor(name="f", kind="fc", in_features=100,
                        out_features=out_features, bias=False)])
    data = np.linspace(0.01, 1.0, 100 * out_features, dtype=np.float32)
    return Model(spec, ParameterStore([
        ParamTensor("f.weight", (out_features, 100), "f32", data)]))


class TestMemoryLayout:
    def test_sign_and_msb_byte_mapping(self):
        model = big_tensor_model()
        layout = MemoryLayout.build(model, seed=0)
        # byte 3 of a little-endian float32 word holds value positions 25..32:
        # bit 7 -> position 32 (sign), bit 6 -> position 31 (exponent MSB)
        kind, loc = layout.map_flip(model, 0, 3, 7, one_to_zero=False)
        assert kind == "param" and loc.position == 32
        kind, loc = layout.map_flip(model, 0, 3, 6, one_to_zero=False)
        assert kind == "param" and loc.position == 31

    def test_mapping_agrees_with_value_level_flip(self):
        # flipping the stored byte's bit 6 at word byte 3 must reproduce the
        # value change of a position-31 flip
        model = big_tensor_model()
        layout = MemoryLayout.build(model, seed=0)
        element = 7
        kind, loc = layout.map_flip(model, 0, element * 4 + 3, 6, one_to_zero=False)
        assert kind == "param" and loc.param.index == element
        value = model.params["f.weight"].data.reshape(-1)[element]
        expected, applied = flip_f32(value, 31, FlipDirection.ZERO_TO_ONE)
        assert applied
        raw = bytearray(np.float32(value).tobytes())
        raw[3] ^= 1 << 6
        assert np.frombuffer(bytes(raw), "<f4")[0] == expected

    def test_code_region_flip_maps_to_nothing(self):
        model = big_tensor_model()
        layout = MemoryLayout.build(model, code_bytes=4096 * 4, seed=0)
        code_page = layout.regions[-1].start // 4096
        kind, loc = layout.map_flip(model, code_page, 100, 3, one_to_zero=False)
        assert kind == "code" and loc is None

    def test_small_tensors_land_unaligned(self):
        model = small_conv_model()
        layout = MemoryLayout.build(model, seed=3)
        offsets = {r.tensor: r.start % 4096 for r in layout.regions if r.kind == "param"}
        # seeded randomization makes at least one small tensor page-unaligned
        assert any(off != 0 for off in offsets.values())
        assert all(off % 4 == 0 for off in offsets.values())

    def test_vulnerable_templates_only_from_large_tensors(self):
        model = small_conv_model()
        layout = MemoryLayout.build(model, seed=0)  # nothing reaches 1MB
        bits = [BitLocation(ParameterRef("c1.weight", 0), 31, FlipDirection.ZERO_TO_ONE)]
        assert layout.vulnerable_templates(model, bits) == set()


class TestSurgicalSearch:
    def test_immediate_hit(self):
        model = big_tensor_model()
        layout = MemoryLayout.build(model, seed=0)
        bits = [BitLocation(ParameterRef("f.weight", 0), 31, FlipDirection.ZERO_TO_ONE)]
        db = FlipTemplateDB("hit", [HammerRow(0, (TemplateFlip(3, 6, False),))])
        result = surgical_search(db, layout, model, bits, seed=0)
        assert result.attempts == 1 and not result.exhausted
        assert result.wall_time_ms == 200

    def test_no_zero_to_one_flips_exhausts(self):
        model = big_tensor_model()
        layout = MemoryLayout.build(model, seed=0)
        bits = [BitLocation(ParameterRef("f.weight", 0), 31, FlipDirection.ZERO_TO_ONE)]
        db = FlipTemplateDB("dry", [HammerRow(i, (TemplateFlip(3, 6, True),))
                                    for i in range(10)])
        result = surgical_search(db, layout, model, bits, seed=0)
        assert result.exhausted and result.attempts == 10

    def test_geometric_attempt_counts(self):
        # a fraction p of rows hit the single vulnerable template: scanning a
        # seeded permutation takes ~1/p attempts on average
        model = big_tensor_model()
        layout = MemoryLayout.build(model, seed=0)
        bits = [BitLocation(ParameterRef("f.weight", 0), 31, FlipDirection.ZERO_TO_ONE)]
        p = 0.05
        n = 4000
        hits = int(n * p)
        rows = [HammerRow(i, (TemplateFlip(3, 6, False) if i % int(1 / p) == 0
                              else TemplateFlip(100, 1, False),))
                for i in range(n)]
        db = FlipTemplateDB("p", rows)
        assert sum(1 for r in rows if r.flips[0].offset == 3) == hits
        attempts = [surgical_search(db, layout, model, bits, seed=s).attempts
                    for s in range(300)]
        assert np.mean(attempts) == pytest.approx(1 / p, rel=0.15)

    def test_more_templates_never_slow_the_search(self):
        model = big_tensor_model()
        layout = MemoryLayout.build(model, seed=0)
        db = synth_template_db("x", n_rows=2048, total_0to1_flips=2048, seed=3)
        few = [BitLocation(ParameterRef("f.weight", i), 31, FlipDirection.ZERO_TO_ONE)
               for i in range(16)]
        many = few + [BitLocation(ParameterRef("f.weight", i), 31,
                                  FlipDirection.ZERO_TO_ONE)
                      for i in range(16, 512)]
        for seed in range(8):
            a = surgical_search(db, layout, model, few, seed=seed)
            b = surgical_search(db, layout, model, many, seed=seed)
            assert b.attempts <= a.attempts

    def test_suite_reports_min_median_max(self):
        model = big_tensor_model()
        layout = MemoryLayout.build(model, seed=0)
        bits = [BitLocation(ParameterRef("f.weight", i), 31, FlipDirection.ZERO_TO_ONE)
                for i in range(0, 120_000, 40)]
        suite = dram_setup_suite(seed=2, rows_per_setup=1024)
        summary = surgical_suite(suite, layout, model, bits, seed=1)
        assert summary["matched_setups"] >= 10
        assert summary["min"] <= summary["median"] <= summary["max"]

    def test_empty_vulnerable_set_rejected(self):
        model = big_tensor_model()
        layout = MemoryLayout.build(model, seed=0)
        db = synth_template_db("x", 8, 8, seed=0)
        with pytest.raises(ValueError):
            surgical_search(db, layout, model, [], seed=0)


def forced_success_model():
    """Every top-exponent-bit flip on the weight is catastrophic: one scalar
    weight drives the score of class 0 and every label is class 1."""
    spec = ModelSpec(input_shape=(1,), class_count=2, layers=[
        LayerDescriptor(name="out", kind="fc", activation="softmax",
                        in_features=1, out_features=2)])
    store = ParameterStore([
        ParamTensor("out.weight", (2, 1), "f32", np.array([0.5, 0.0], np.float32)),
        ParamTensor("out.bias", (2,), "f32", np.array([0.0, 0.9], np.float32)),
    ])
    images = np.array([[1.0], [1.1], [0.9], [1.0]], np.float32)
    labels = np.array([1, 1, 1, 1], np.uint16)
    return Model(spec, store), Dataset(images, labels, 2)


class TestBlindCampaign:
    def test_dense_db_and_no_code_region_forces_success(self):
        model, dataset = forced_success_model()
        layout = MemoryLayout.build(model, code_bytes=0, min_object_bytes=1, seed=0)
        # whichever page is hit, a word-0 top-exponent-bit flip is damaging:
        # the weight blows up class 0's score, the bias raises it past 0.9
        rows = [HammerRow(i, (TemplateFlip(3, 6, False),)) for i in range(8)]
        db = FlipTemplateDB("dense", rows)
        config = CampaignConfig(experiments=5, max_attempts=50, seed=1, crash_prob=0.0)
        result = blind_campaign(db, layout, model, dataset, config)
        summary = result.summary()
        assert summary["corrupted"] == 5
        assert all(r > 0.1 for r in summary["rad_top1"])

    def test_empty_db_rows_time_out(self):
        model, dataset = forced_success_model()
        layout = MemoryLayout.build(model, code_bytes=0, min_object_bytes=1, seed=0)
        db = FlipTemplateDB("empty", [HammerRow(i, ()) for i in range(4)])
        config = CampaignConfig(experiments=3, max_attempts=20, seed=0)
        summary = blind_campaign(db, layout, model, dataset, config).summary()
        assert summary["timed_out"] == 3

    def test_determinism(self):
        model, dataset = forced_success_model()
        layout = MemoryLayout.build(model, code_bytes=4096, min_object_bytes=1, seed=0)
        db = synth_template_db("d", n_rows=64, total_0to1_flips=100, seed=2)
        config = CampaignConfig(experiments=4, max_attempts=30, seed=5)
        a = blind_campaign(db, layout, model, dataset, config)
        b = blind_campaign(db, layout, model, dataset, config)
        assert a.summary() == b.summary()
        assert [(r.experiment, r.attempt, r.row_id) for r in a.attempts_log] == \
               [(r.experiment, r.attempt, r.row_id) for r in b.attempts_log]

    def test_conservation_of_applied_flips(self):
        model, dataset = forced_success_model()
        layout = MemoryLayout.build(model, code_bytes=0, min_object_bytes=1, seed=0)
        db = synth_template_db("c", n_rows=32, total_0to1_flips=64, seed=4)
        config = CampaignConfig(experiments=2, max_attempts=25, seed=3, crash_prob=0.0)
        result = blind_campaign(db, layout, model, dataset, config)
        for exp in result.experiments:
            logged = [l for rec in result.attempts_log if rec.experiment == exp.experiment
                      for l in rec.landed if l[5]]
            assert len(logged) == exp.flips_applied
            assert len(exp.applied_locations) == exp.flips_applied

    def test_crash_probability_one_crashes_on_code_flip(self):
        model, dataset = forced_success_model()
        # all-code layout: every landed flip is a potential crash
        layout = MemoryLayout.build(model, code_bytes=1 << 20, seed=0)
        db = synth_template_db("k", n_rows=16, total_0to1_flips=400, seed=6)
        config = CampaignConfig(experiments=3, max_attempts=50, seed=2, crash_prob=1.0)
        summary = blind_campaign(db, layout, model, dataset, config).summary()
        assert summary["crashed"] == 3
