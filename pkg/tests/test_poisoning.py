import json
import warnings
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import chisquare

from backdoorlab.geometry import BoundingBox
from backdoorlab.poisoning import (AttackKind, AttackStrategy, Placement, TriggerSpec, apply_attack,
                                   generate_dataset, load_manifest, make_eval_instances, make_triggered_set,
                                   manifest_to_doc, regenerate, save_manifest, stamp_trigger, trigger_size,
                                   trigger_squares)

BLUE = TriggerSpec()


@pytest.fixture(scope="module")
def small():
    return generate_dataset(40, 3, seed=3)


@pytest.fixture(scope="module")
def five_hundred():
    return generate_dataset(500, 3, image_size=(144, 240), seed=11)


def attacked(m, kind, ratio=0.5, target=None, **kw):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return apply_attack(m, AttackStrategy(kind, target), ratio, **kw)


class TestGenerate:
    def test_empty(self):
        assert len(generate_dataset(0)) == 0

    def test_deterministic_bytes(self):
        a = json.dumps(manifest_to_doc(generate_dataset(6, seed=5)))
        b = json.dumps(manifest_to_doc(generate_dataset(6, seed=5)))
        c = json.dumps(manifest_to_doc(generate_dataset(6, seed=6)))
        assert a == b and a != c

    def test_class_balance(self, five_hundred):
        counts = Counter(o.original_label for s in five_hundred.scenes for o in s.objects)
        mean = sum(counts.values()) / 3
        assert sorted(counts) == [1, 2, 3]
        assert all(abs(v - mean) <= 0.1 * mean for v in counts.values())

    def test_objects_in_bounds_and_disjoint(self, small):
        for s in small.scenes:
            for i, o in enumerate(s.objects):
                assert 0 <= o.box.x_min and o.box.x_max <= s.width and o.box.y_max <= s.height
                for p in s.objects[i + 1:]:
                    assert min(o.box.x_max, p.box.x_max) <= max(o.box.x_min, p.box.x_min) or \
                        min(o.box.y_max, p.box.y_max) <= max(o.box.y_min, p.box.y_min)

    @pytest.mark.parametrize("kw", [{"n_classes": 1}, {"image_size": 100}, {"objects_per_scene_range": (1, 10)},
                                    {"fill": 0.0}])
    def test_rejects_bad_config(self, kw):
        with pytest.raises(ValueError):
            generate_dataset(2, **kw)


class TestTriggerSize:
    def test_ten_percent(self):
        assert trigger_size(BoundingBox(0, 0, 100, 200), BLUE) == 10

    def test_discard(self):
        assert trigger_size(BoundingBox(0, 0, 30, 30), BLUE) is None

    def test_clip(self):
        assert trigger_size(BoundingBox(0, 0, 400, 300), BLUE) == 24

    def test_boundary(self):
        assert trigger_size(BoundingBox(0, 0, 40, 40), BLUE) == 4
        assert trigger_size(BoundingBox(0, 0, 240, 250), BLUE) == 24

    def test_fixed_size(self):
        spec = TriggerSpec(fixed_px=12)
        assert trigger_size(BoundingBox(0, 0, 30, 30), spec) == 12
        assert trigger_size(BoundingBox(0, 0, 10, 30), spec) is None

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            TriggerSpec(min_px=30)
        with pytest.raises(ValueError):
            TriggerSpec(size_ratio=1.0)


class TestStamp:
    def test_center_on_symmetric_box(self):
        img = np.zeros((100, 100, 3), np.uint8)
        box = BoundingBox(10, 10, 90, 90)
        out = stamp_trigger(img, box, BLUE, Placement.CENTER)
        ys, xs = np.nonzero(out[..., 2] == 255)
        assert (xs.mean() + 0.5, ys.mean() + 0.5) == box.center
        assert np.all(out[ys, xs] == BLUE.color)
        assert not img.any()

    @pytest.mark.parametrize("placement", list(Placement))
    def test_inside_box(self, placement):
        box = BoundingBox(13, 7, 71, 88)
        k = trigger_size(box, BLUE)
        for x0, y0, kk in trigger_squares(box, k, placement, np.random.default_rng(0)):
            assert box.x_min <= x0 and x0 + kk <= box.x_max and box.y_min <= y0 and y0 + kk <= box.y_max

    def test_high_above_low(self):
        box = BoundingBox(0, 0, 60, 90)
        (_, yh, _), = trigger_squares(box, 6, Placement.HIGH)
        (_, yl, _), = trigger_squares(box, 6, Placement.LOW)
        assert yh + 3 < 30 and yl + 3 > 60
        assert len(trigger_squares(box, 6, Placement.BOTH)) == 2

    def test_random_uniform_chi_square(self):
        box = BoundingBox(0, 0, 100, 100)
        rng = np.random.default_rng(99)
        pos = np.array([trigger_squares(box, 10, Placement.RANDOM, rng)[0][:2] for _ in range(10_000)])
        edges = [0, 23, 46, 69, 91]  # 91 valid offsets per axis
        counts, _, _ = np.histogram2d(pos[:, 0], pos[:, 1], bins=[edges, edges])
        widths = np.diff(edges)
        expected = np.outer(widths, widths) / 91 ** 2 * 10_000
        assert chisquare(counts.ravel(), expected.ravel()).pvalue > 0.01

    def test_empty_region_rejected(self):
        with pytest.raises(ValueError):
            stamp_trigger(np.zeros((10, 10, 3), np.uint8), BoundingBox(0, 0, 5, 5), BLUE, Placement.CENTER, size=6)

    def test_quad_pattern(self):
        out = stamp_trigger(np.zeros((50, 50, 3), np.uint8), BoundingBox(0, 0, 50, 50),
                            TriggerSpec(pattern="quad"), Placement.CENTER, size=8)
        assert {tuple(v) for v in out.reshape(-1, 3)} >= {(0, 0, 255), (255, 255, 255)}


class TestApplyAttack:
    def test_clean_and_zero_ratio(self, small):
        for m in (attacked(small, "clean"), attacked(small, "baddet+oda", 0.0)):
            assert not m.edits
            for a, b in zip(m.scenes, small.scenes):
                assert np.array_equal(a.image, b.image)
                assert [o.train_label for o in a.objects] == [o.train_label for o in b.objects]

    def test_input_untouched(self, small):
        before = json.dumps(manifest_to_doc(small))
        attacked(small, "uba", 0.7)
        assert json.dumps(manifest_to_doc(small)) == before

    def test_baddet_plus_counting(self, five_hundred):
        m = attacked(five_hundred, "baddet+oda", 0.5)
        per_image = [sum(o.poisoned for o in s.objects) for s in m.scenes]
        assert per_image.count(1) == 250 and per_image.count(0) == 250
        for s in m.scenes:
            for o in s.objects:
                assert o.train_label == o.original_label

    def test_baddet_rma_relabels(self, small):
        m = attacked(small, "baddet-rma", 0.5, target=2)
        poisoned = [o for s in m.scenes for o in s.objects if o.poisoned]
        assert poisoned and all(o.train_label == 2 and o.original_label != 2 for o in poisoned)

    def test_uba_zero_size(self, small):
        m = attacked(small, "uba", 0.3)
        poisoned = [o for s in m.scenes for o in s.objects if o.poisoned]
        assert poisoned and all(o.box.degenerate and o.train_label == o.original_label for o in poisoned)

    def test_uba_box_removes(self, small):
        m = attacked(small, "uba-box", 0.3)
        poisoned = [o for s in m.scenes for o in s.objects if o.poisoned]
        assert poisoned and all(o.removed and o.train_label is None for o in poisoned)

    @pytest.mark.parametrize("kind", ["align", "align-random"])
    def test_align_is_image_only(self, small, kind):
        m = attacked(small, kind, 0.5)
        assert sum(e["action"] == kind for e in m.edits) == 20
        for a, b in zip(m.scenes, small.scenes):
            assert [vars(o) for o in a.objects] == [vars(o) for o in b.objects]
        changed = sum(not np.array_equal(a.image, b.image) for a, b in zip(m.scenes, small.scenes))
        assert changed == 20

    def test_align_fixed_size(self, small):
        m = attacked(small, "align", 0.5)
        assert {sq[2] for e in m.edits for sq in e["trigger"]} == {12}

    def test_target_absent(self, small):
        with pytest.raises(ValueError):
            attacked(small, "baddet+rma", 0.5, target=9)

    def test_ratio_cap_warns(self):
        m = generate_dataset(10, seed=1)
        with pytest.warns(UserWarning):
            apply_attack(m, AttackStrategy("baddet+rma", 1), 1.0)

    def test_idempotent_metadata(self, small):
        m = attacked(small, "baddet+oda", 0.5)
        again = apply_attack(m, AttackStrategy("baddet+oda"), 0.5)
        assert again.poison == m.poison and again.edits == m.edits
        with pytest.raises(ValueError):
            apply_attack(m, AttackStrategy("uba"), 0.5)

    def test_bad_ratio(self, small):
        with pytest.raises(ValueError):
            apply_attack(small, AttackStrategy("uba"), 1.5)


@given(st.sampled_from([k.value for k in AttackKind]), st.floats(0, 1), st.integers(0, 3))
def test_original_labels_preserved(kind, ratio, seed):
    m = generate_dataset(8, seed=seed)
    target = 1 if kind in ("baddet+rma", "baddet-rma") else None
    if target is not None and not any(o.original_label == 1 for s in m.scenes for o in s.objects):
        return
    out = attacked(m, kind, ratio, target=target, seed=seed)
    assert [o.original_label for s in out.scenes for o in s.objects] == \
           [o.original_label for s in m.scenes for o in s.objects]
    for e in out.edits:
        if e["object"] is not None:
            assert len(e["trigger"]) == 1


class TestManifestIO:
    def test_inline_round_trip(self, small, tmp_path):
        m = attacked(small, "baddet+rma", 0.5, target=1)
        back = load_manifest(save_manifest(m, tmp_path / "m.json", inline=True))
        assert json.dumps(manifest_to_doc(back)) == json.dumps(manifest_to_doc(m))

    def test_file_round_trip(self, small, tmp_path):
        path = save_manifest(small, tmp_path / "train.json")
        assert (tmp_path / "train_images").is_dir()
        assert json.dumps(manifest_to_doc(load_manifest(path))) == json.dumps(manifest_to_doc(small))

    def test_schema_keys(self, small):
        doc = manifest_to_doc(attacked(small, "uba", 0.2))
        assert {"version", "split", "seed", "poison", "scenes"} <= set(doc)
        assert list(doc["poison"])[:4] == ["strategy", "ratio", "trigger", "placement"]
        assert set(doc["scenes"][0]) >= {"id", "inline", "width", "height", "objects"}
        assert set(doc["scenes"][0]["objects"][0]) == {"bbox", "original_label", "train_label", "poisoned",
                                                         "removed"}

    @pytest.mark.parametrize("kind,target", [("baddet+oda", None), ("baddet-rma", 2), ("uba-box", None),
                                             ("align-random", None)])
    def test_regenerate_byte_exact(self, small, kind, target):
        m = attacked(small, kind, 0.4, target=target, placement=Placement.RANDOM, seed=9)
        doc = manifest_to_doc(m)
        assert json.dumps(manifest_to_doc(regenerate(doc))) == json.dumps(doc)

    def test_version_checked(self, small):
        doc = manifest_to_doc(small)
        doc["version"] = 99
        with pytest.raises(ValueError):
            from backdoorlab.poisoning import manifest_from_doc
            manifest_from_doc(doc)


class TestEvalInstances:
    def test_counts_and_pixel_diff(self, small):
        test = generate_dataset(10, seed=4, split="test", image_size=(144, 336))
        inst, skipped = make_eval_instances(test)
        assert len(inst) + skipped == sum(len(s.objects) for s in test.scenes)
        assert len(inst) == sum(trigger_size(o.box, BLUE) is not None for s in test.scenes for o in s.objects)
        by_id = {s.id: s for s in test.scenes}
        for i in inst:
            clean = by_id[i.scene_id]
            diff = np.any(i.image != clean.image, axis=2)
            ys, xs = np.nonzero(diff)
            k = trigger_size(i.objects[i.focal].box, BLUE)
            (x0, y0, _), = trigger_squares(i.objects[i.focal].box, k, Placement.CENTER)
            assert xs.min() >= x0 and xs.max() < x0 + k and ys.min() >= y0 and ys.max() < y0 + k
            assert [o.poisoned for o in i.objects].count(True) == 1

    def test_three_poisonable(self):
        m = generate_dataset(1, objects_per_scene_range=(3, 3), image_size=336, seed=0, split="test")
        assert len(make_eval_instances(m)[0]) == 3

    def test_triggered_set_marks_everything(self, small):
        scenes = make_triggered_set(small)
        assert all(o.poisoned for s in scenes for o in s.objects if trigger_size(o.box, BLUE) is not None)
