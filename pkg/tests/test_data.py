"""Scene sampling, expression semantics, rasterization, dataset IO."""

import collections
import filecmp
import json
import os

import numpy as np
import pytest

from refbox.data import (COLORS, SceneConfig, SceneSpec, SceneObject, Dataset,
                         generate_dataset, generate_sample, generate_scene,
                         load_dataset, make_expression, matching_objects,
                         parse_expression, read_ppm, render, render_uint8,
                         with_oov_adjective, write_ppm, build_vocabulary)
from refbox.errors import GenerationError, InputError
from refbox.heads import BoundingBox, iou
from refbox.text import UNK_ID, tokenize

from oracles import oracle_referents


class TestSceneGeneration:
    def test_deterministic(self):
        a = generate_scene(7)
        b = generate_scene(7)
        assert len(a.objects) == len(b.objects)
        for oa, ob in zip(a.objects, b.objects):
            assert (oa.shape, oa.color, oa.size) == (ob.shape, ob.color, ob.size)
            assert oa.bbox == ob.bbox
        assert a.target_index == b.target_index

    def test_overlap_constraint(self):
        for seed in range(100):
            scene = generate_scene(seed)
            objs = scene.objects
            for i in range(len(objs)):
                for j in range(i + 1, len(objs)):
                    assert iou(objs[i].bbox, objs[j].bbox) <= 0.1 + 1e-9

    def test_boxes_inside_image(self):
        for seed in range(100):
            for o in generate_scene(seed).objects:
                x1, y1, x2, y2 = o.bbox.corners()
                assert 0.0 <= x1 < x2 <= 1.0
                assert 0.0 <= y1 < y2 <= 1.0

    def test_object_count_range(self):
        counts = {len(generate_scene(s).objects) for s in range(200)}
        assert counts <= {2, 3, 4}
        assert len(counts) == 3

    def test_size_classes_disjoint(self):
        for seed in range(200):
            for o in generate_scene(seed).objects:
                if o.size == "small":
                    assert 0.10 <= o.bbox.w <= 0.18
                else:
                    assert 0.22 <= o.bbox.w <= 0.34

    def test_placement_failure_raises(self):
        config = SceneConfig(min_objects=4, max_objects=4, max_overlap=0.0,
                             placement_retries=3,
                             duplicate_prob=0.0)
        with pytest.raises(GenerationError):
            for seed in range(50):
                generate_scene(seed, config)


class TestExpressions:
    def test_unique_attribute_uses_short_template(self):
        objs = [
            SceneObject("circle", "red", "small", BoundingBox(0.3, 0.3, 0.1, 0.1)),
            SceneObject("square", "blue", "small", BoundingBox(0.7, 0.7, 0.1, 0.1)),
            SceneObject("square", "blue", "large", BoundingBox(0.3, 0.7, 0.25, 0.25)),
        ]
        scene = SceneSpec(objects=objs, target_index=0, image_side=64)
        text, template = make_expression(scene)
        assert text == "red circle"
        assert template == "attribute"

    def test_two_twins_force_spatial_template(self):
        objs = [
            SceneObject("circle", "red", "small", BoundingBox(0.25, 0.5, 0.1, 0.1)),
            SceneObject("circle", "red", "small", BoundingBox(0.75, 0.5, 0.1, 0.1)),
        ]
        scene = SceneSpec(objects=objs, target_index=0, image_side=64)
        text, template = make_expression(scene)
        assert template == "spatial"
        assert matching_objects(text, scene) == [0]

    def test_size_template_when_it_disambiguates(self):
        objs = [
            SceneObject("circle", "red", "small", BoundingBox(0.3, 0.5, 0.1, 0.1)),
            SceneObject("circle", "red", "large", BoundingBox(0.7, 0.5, 0.3, 0.3)),
        ]
        scene = SceneSpec(objects=objs, target_index=0, image_side=64)
        text, template = make_expression(scene)
        assert text == "small red circle"
        assert template == "size"

    def test_emitted_expressions_pick_exactly_the_target(self):
        for i in range(3000):
            s = generate_sample(11, i)
            assert matching_objects(s.expression, s.scene) == [s.scene.target_index]

    def test_semantics_match_independent_oracle(self):
        for i in range(3000):
            s = generate_sample(12, i)
            assert oracle_referents(s.expression, s.scene) == [s.scene.target_index]

    def test_template_coverage(self):
        counts = collections.Counter(generate_sample(0, i).template for i in range(10000))
        total = sum(counts.values())
        for kind in ("attribute", "size", "spatial"):
            assert counts[kind] / total >= 0.05, counts

    def test_attribute_marginals_near_uniform(self):
        colors = collections.Counter()
        shapes = collections.Counter()
        sizes = collections.Counter()
        for i in range(10000):
            for o in generate_sample(1, i).scene.objects:
                colors[o.color] += 1
                shapes[o.shape] += 1
                sizes[o.size] += 1
        for counter, k in ((colors, 5), (shapes, 3), (sizes, 2)):
            total = sum(counter.values())
            for value in counter.values():
                assert abs(value / total - 1 / k) <= 0.05

    def test_parse_roundtrip(self):
        for i in range(500):
            s = generate_sample(2, i)
            template, _ = parse_expression(s.expression)
            assert template == s.template

    def test_oov_adjective_leaves_target_semantics(self):
        rng = np.random.default_rng(0)
        s = generate_sample(3, 0)
        noisy = with_oov_adjective(s.expression, rng)
        assert noisy.split()[1:] == s.expression.split()


class TestRendering:
    def test_empty_scene_uniform_gray(self):
        scene = SceneSpec(objects=[], target_index=0, image_side=32)
        img = render_uint8(scene)
        assert np.all(img == 128)

    def test_center_pixel_has_object_color(self):
        for i in range(50):
            s = generate_sample(4, i)
            img = render_uint8(s.scene)
            side = s.scene.image_side
            # Scan single-object renders so occlusion cannot interfere.
            for obj in s.scene.objects:
                solo = SceneSpec(objects=[obj], target_index=0, image_side=side)
                solo_img = render_uint8(solo)
                r = min(int(obj.bbox.cy * side), side - 1)
                c = min(int(obj.bbox.cx * side), side - 1)
                if obj.shape == "triangle":
                    r = min(int((obj.bbox.cy + obj.bbox.h / 4) * side), side - 1)
                assert tuple(solo_img[r, c]) == COLORS[obj.color]
            assert img.shape == (side, side, 3)

    def test_mask_bbox_matches_annotation_within_one_pixel(self):
        for i in range(60):
            s = generate_sample(5, i)
            side = s.scene.image_side
            for obj in s.scene.objects:
                solo = SceneSpec(objects=[obj], target_index=0, image_side=side)
                img = render_uint8(solo)
                mask = np.any(img != 128, axis=-1)
                rows = np.where(mask.any(axis=1))[0]
                cols = np.where(mask.any(axis=0))[0]
                x1, y1, x2, y2 = obj.bbox.corners()
                tol = 1.0 / side + 1e-9
                assert abs(cols[0] / side - x1) <= tol
                assert abs((cols[-1] + 1) / side - x2) <= tol
                assert abs(rows[0] / side - y1) <= tol
                assert abs((rows[-1] + 1) / side - y2) <= tol

    def test_render_deterministic(self):
        s = generate_sample(6, 0)
        assert np.array_equal(render_uint8(s.scene), render_uint8(s.scene))

    def test_float_render_range_and_layout(self):
        s = generate_sample(6, 1)
        img = render(s.scene)
        assert img.shape == (3, s.scene.image_side, s.scene.image_side)
        assert img.dtype == np.float32
        assert img.min() >= 0.0 and img.max() <= 1.0


class TestPpm:
    def test_roundtrip(self, tmp_path):
        img = np.random.default_rng(0).integers(0, 256, size=(9, 7, 3)).astype(np.uint8)
        path = tmp_path / "img.ppm"
        write_ppm(path, img)
        assert np.array_equal(read_ppm(path), img)

    def test_rejects_garbage(self, tmp_path):
        path = tmp_path / "bad.ppm"
        path.write_bytes(b"JUNK")
        with pytest.raises(InputError):
            read_ppm(path)


class TestDatasetIo:
    def test_write_load_roundtrip_bit_exact(self, tmp_path):
        out = tmp_path / "ds"
        generate_dataset(12, 3, out)
        ds = load_dataset(out)
        assert len(ds) == 12
        for i in range(12):
            fresh = generate_sample(3, i)
            loaded = ds[i]
            assert loaded.expression == fresh.expression
            assert loaded.bbox == fresh.bbox
            assert np.array_equal(loaded.image_uint8(), render_uint8(fresh.scene))
            assert np.array_equal(loaded.image(), fresh.image())

    def test_regeneration_byte_identical(self, tmp_path):
        a = tmp_path / "a"
        b = tmp_path / "b"
        generate_dataset(10, 9, a)
        generate_dataset(10, 9, b)
        assert (a / "manifest.jsonl").read_bytes() == (b / "manifest.jsonl").read_bytes()
        for name in sorted(os.listdir(a / "images")):
            assert (a / "images" / name).read_bytes() == (b / "images" / name).read_bytes()

    def test_disjoint_index_ranges_differ(self, tmp_path):
        a = tmp_path / "a"
        b = tmp_path / "b"
        generate_dataset(5, 9, a, start_index=0)
        generate_dataset(5, 9, b, start_index=5)
        da, db = load_dataset(a), load_dataset(b)
        assert [s.bbox for s in da.samples] != [s.bbox for s in db.samples]

    def test_meta_record(self, tmp_path):
        out = tmp_path / "ds"
        generate_dataset(3, 1, out)
        first = json.loads((out / "manifest.jsonl").read_text().splitlines()[0])
        assert first["kind"] == "meta"
        assert first["schema_version"] == 1
        assert first["count"] == 3

    def test_expression_target_consistency_scan(self, tmp_path):
        out = tmp_path / "ds"
        generate_dataset(200, 5, out)
        ds = load_dataset(out)
        seen = {}
        for s in ds.samples:
            key = (json.dumps(sorted([(o.shape, o.color, o.size, o.bbox.cx) for o in s.scene.objects])), s.expression)
            attrs = (s.scene.target.shape, s.scene.target.color, s.scene.target.size)
            assert seen.setdefault(key, attrs) == attrs

    def test_missing_manifest_raises(self, tmp_path):
        with pytest.raises(InputError):
            load_dataset(tmp_path / "nope")

    def test_oov_split_has_unknown_words(self, tmp_path):
        base = tmp_path / "train"
        oov = tmp_path / "oov"
        _, exprs = generate_dataset(50, 2, base)
        generate_dataset(20, 2, oov, start_index=50, oov=True)
        vocab = build_vocabulary(exprs)
        ds = load_dataset(oov)
        unk_hits = sum(UNK_ID in tokenize(s.expression, vocab).ids[:tokenize(s.expression, vocab).length]
                       for s in ds.samples)
        assert unk_hits == len(ds)

    def test_invalid_size_rejected(self, tmp_path):
        with pytest.raises(InputError):
            generate_dataset(0, 0, tmp_path / "x")
