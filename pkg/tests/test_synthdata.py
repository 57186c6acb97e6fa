import json

import numpy as np
import pytest

from occludet.errors import ContractViolation, DataError
from occludet.synthdata import (
    SceneSpec,
    SequenceSample,
    ObjectAnnotation,
    _paste,
    generate_sequence,
    generate_static_composites,
    occlusion_onset,
    read_dataset,
    write_dataset,
)


def _square_spec(**overrides):
    base = dict(
        canvas_hw=(96, 96),
        num_objects=2,
        class_ids=(2,),  # squares: footprint is exactly the box, so rect arithmetic is exact
        sprite_size_range=(14, 22),
        speed_range=(0.5, 1.5),
        num_occluders=2,
        occlusion_duration_range=(8, 12),
        sequence_length=24,
    )
    base.update(overrides)
    return SceneSpec(**base)


# --- geometry oracle: rectangle arithmetic from the simulation state ------------------


def _rect_pixels(cx, cy, size, canvas_hw):
    h, w = canvas_hw
    x0 = int(round(cx - size / 2.0))
    y0 = int(round(cy - size / 2.0))
    grid = np.zeros((h, w), dtype=bool)
    grid[max(0, y0) : min(h, y0 + size), max(0, x0) : min(w, x0 + size)] = True
    return grid


def visibility_oracle(sample: SequenceSample, spec: SceneSpec, obj: int, t: int) -> float:
    meta = sample.meta
    cx, cy = meta["object_paths"][obj][t]
    size = meta["object_sizes"][obj]
    obj_px = _rect_pixels(cx, cy, size, spec.canvas_hw)
    cover = np.zeros(spec.canvas_hw, dtype=bool)
    for o_size, o_path in zip(meta["occluder_sizes"], meta["occluder_paths"]):
        ox, oy = o_path[t]
        cover |= _rect_pixels(ox, oy, o_size, spec.canvas_hw)
    total = obj_px.sum()
    return float((obj_px & ~cover).sum() / total) if total else 0.0


def test_visible_fraction_matches_geometry_oracle():
    spec = _square_spec()
    for seed in range(4):
        sample = generate_sequence(spec, seed)
        for t in range(len(sample.frames)):
            for obj in range(spec.num_objects):
                ann = sample.annotations[t][obj]
                expected = visibility_oracle(sample, spec, obj, t)
                assert ann.visible_fraction == pytest.approx(expected, abs=1e-6)
                assert ann.occluded == (expected < spec.occlusion_flag_threshold)


# --- scheduled occlusion ------------------------------------------------------------------


def test_no_occluders_means_fully_visible():
    spec = _square_spec(num_occluders=0)
    sample = generate_sequence(spec, 0)
    for anns in sample.annotations:
        for a in anns:
            assert a.visible_fraction == pytest.approx(1.0)
            assert not a.occluded
    assert sample.meta["occlusion"] is None
    assert occlusion_onset(sample) is None


def test_static_object_swept_for_scheduled_frames():
    spec = _square_spec(speed_range=(0.0, 0.0), num_occluders=1, num_objects=1)
    sample = generate_sequence(spec, 3)
    event = sample.meta["occlusion"]
    onset, duration = event["onset"], event["duration"]
    # every scheduled frame is fully covered and flagged
    for t in range(onset, onset + duration):
        ann = sample.annotations[t][0]
        assert ann.occluded
        assert ann.visible_fraction == pytest.approx(0.0)
    # the box never moves and always comes from simulation state, not pixels
    boxes = np.stack([sample.annotations[t][0].box for t in range(len(sample.frames))])
    assert np.ptp(boxes, axis=0).max() == pytest.approx(0.0)
    assert occlusion_onset(sample) is not None
    assert occlusion_onset(sample) <= onset


def test_occluded_box_equals_simulated_position():
    spec = _square_spec()
    sample = generate_sequence(spec, 9)
    event = sample.meta["occlusion"]
    t = event["onset"] + event["duration"] // 2
    ann = sample.annotations[t][0]
    cx, cy = sample.meta["object_paths"][0][t]
    size = sample.meta["object_sizes"][0]
    np.testing.assert_allclose(
        ann.box, [cx - size / 2, cy - size / 2, cx + size / 2, cy + size / 2], atol=1e-5
    )
    assert ann.occluded


def test_scheduled_duration_within_requested_range():
    spec = _square_spec(occlusion_duration_range=(10, 12), sequence_length=30)
    for seed in range(5):
        event = generate_sequence(spec, seed).meta["occlusion"]
        assert 10 <= event["duration"] <= 12


def test_infeasible_occlusion_duration_rejected():
    with pytest.raises(ContractViolation):
        generate_sequence(_square_spec(occlusion_duration_range=(30, 40), sequence_length=24), 0)


def test_determinism_same_spec_seed():
    spec = _square_spec()
    a = generate_sequence(spec, 42)
    b = generate_sequence(spec, 42)
    for fa, fb in zip(a.frames, b.frames):
        np.testing.assert_array_equal(fa, fb)
    assert a.meta == b.meta
    for ann_a, ann_b in zip(a.annotations, b.annotations):
        for x, y in zip(ann_a, ann_b):
            np.testing.assert_array_equal(x.box, y.box)
            assert (x.label, x.occluded, x.visible_fraction) == (y.label, y.occluded, y.visible_fraction)


def test_different_seeds_differ():
    spec = _square_spec()
    a = generate_sequence(spec, 0)
    b = generate_sequence(spec, 1)
    assert any(not np.array_equal(fa, fb) for fa, fb in zip(a.frames, b.frames))


# --- composites -------------------------------------------------------------------------


def test_composites_single_object_box_in_canvas():
    spec = _square_spec(num_objects=1)
    (image, boxes, labels), = generate_static_composites(spec, 0, 1)
    assert image.shape == (96, 96, 3)
    assert boxes.shape == (1, 4) and labels.shape == (1,)
    assert boxes[0, 0] >= 0 and boxes[0, 1] >= 0
    assert boxes[0, 2] <= 96 and boxes[0, 3] <= 96


def test_paste_copy_semantics():
    canvas = np.zeros((20, 20, 3), dtype=np.uint8)
    mask = np.zeros((6, 6), dtype=bool)
    mask[1:5, 2:4] = True
    tex = np.full((6, 6, 3), 200, dtype=np.uint8)
    _paste(canvas, mask, tex, cx=10.0, cy=10.0)
    x0, y0 = 10 - 3, 10 - 3
    region = canvas[y0 : y0 + 6, x0 : x0 + 6]
    np.testing.assert_array_equal(region[mask], tex[mask])
    assert (region[~mask] == 0).all()


def test_composites_deterministic_and_counted():
    spec = _square_spec()
    a = generate_static_composites(spec, 5, 4)
    b = generate_static_composites(spec, 5, 4)
    assert len(a) == 4
    for (ia, ba, la), (ib, bb, lb) in zip(a, b):
        np.testing.assert_array_equal(ia, ib)
        np.testing.assert_array_equal(ba, bb)
        np.testing.assert_array_equal(la, lb)


def test_composites_require_positive_count():
    with pytest.raises(ContractViolation):
        generate_static_composites(_square_spec(), 0, 0)


# --- disk round trip ----------------------------------------------------------------------


def test_round_trip_exact(tmp_path):
    spec = _square_spec(sequence_length=10, occlusion_duration_range=(2, 3))
    samples = [generate_sequence(spec, s) for s in range(2)]
    write_dataset(tmp_path / "ds", samples)
    loaded = read_dataset(tmp_path / "ds")
    assert len(loaded) == 2
    for orig, back in zip(samples, loaded):
        assert orig.meta == back.meta
        assert len(orig.frames) == len(back.frames)
        for fa, fb in zip(orig.frames, back.frames):
            np.testing.assert_array_equal(fa, fb)
        for ann_a, ann_b in zip(orig.annotations, back.annotations):
            assert len(ann_a) == len(ann_b)
            for x, y in zip(ann_a, ann_b):
                np.testing.assert_array_equal(x.box, y.box)
                assert x.label == y.label
                assert x.occluded == y.occluded
                assert x.visible_fraction == y.visible_fraction


def test_empty_dataset_round_trips(tmp_path):
    write_dataset(tmp_path / "empty", [])
    assert read_dataset(tmp_path / "empty") == []


def test_golden_jsonl_record(tmp_path):
    root = tmp_path / "ds"
    seq = root / "seq_000000"
    seq.mkdir(parents=True)
    (root / "manifest.json").write_text(json.dumps({"sequences": ["seq_000000"]}))
    record = {
        "frame": 0,
        "objects": [
            {"box": [1.0, 2.0, 11.0, 12.0], "class": 2, "occluded": True, "visible_fraction": 0.125}
        ],
    }
    (seq / "annotations.jsonl").write_text(json.dumps(record) + "\n")
    from PIL import Image

    Image.fromarray(np.zeros((8, 8, 3), dtype=np.uint8)).save(seq / "frame_000000.png")
    (sample,) = read_dataset(root)
    ann = sample.annotations[0][0]
    np.testing.assert_allclose(ann.box, [1.0, 2.0, 11.0, 12.0])
    assert ann.label == 2
    assert ann.occluded is True
    assert ann.visible_fraction == 0.125


def test_malformed_record_names_file_and_line(tmp_path):
    root = tmp_path / "ds"
    seq = root / "seq_000000"
    seq.mkdir(parents=True)
    (root / "manifest.json").write_text(json.dumps({"sequences": ["seq_000000"]}))
    (seq / "annotations.jsonl").write_text('{"frame": 0, "objects": [{"box": [1, 2]}]}\n')
    with pytest.raises(DataError) as err:
        read_dataset(root)
    assert "annotations.jsonl:1" in str(err.value)


def test_spec_validation():
    with pytest.raises(ContractViolation):
        SceneSpec(sprite_size_range=(60, 120), canvas_hw=(96, 96))
    with pytest.raises(ContractViolation):
        SceneSpec(occluder_style="wild")
    with pytest.raises(ContractViolation):
        SceneSpec(speed_range=(-1.0, 1.0))
