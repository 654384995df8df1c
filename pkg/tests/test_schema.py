import json

import numpy as np
import pytest

import cfa_pose as cp
from cfa_pose.schema import AnnotationError


def make_annotation(image_id="img0", p=16, head_length=10.0, visibility=None, keypoints=None):
    if keypoints is None:
        keypoints = tuple((float(5 + j), float(7 + j)) for j in range(p))
    if visibility is None:
        visibility = tuple(True for _ in keypoints)
    return cp.PersonAnnotation(
        image_id=image_id,
        keypoints=tuple(keypoints),
        visibility=tuple(visibility),
        head_length=head_length,
    )


def write_annotation_file(path, records):
    path.write_text(json.dumps(records))
    return path


def valid_record(image_id="img0", p=16):
    return {
        "image_id": image_id,
        "keypoints": [[float(j), float(j + 1)] for j in range(p)],
        "visibility": [1] * p,
        "head_length": 9.5,
    }


class TestSkeleton:
    def test_default_is_16_joints(self, skel):
        assert skel.num_joints == 16
        assert len(skel.joint_names) == 16
        assert len(skel.joint_groups) == 7

    def test_flip_permutation_is_involution(self, skel):
        perm = skel.flip_permutation()
        assert [perm[perm[j]] for j in range(16)] == list(range(16))
        assert sorted(perm) == list(range(16))

    def test_limbs_and_groups_in_range(self, skel):
        for parent, child in skel.limbs:
            assert 0 <= parent < 16 and 0 <= child < 16
        for _, indices in skel.joint_groups:
            assert all(0 <= j < 16 for j in indices)

    def test_duplicate_flip_pair_rejected(self):
        with pytest.raises(ValueError, match="flip pair"):
            cp.SkeletonSpec(("a", "b"), ((0, 2),), (), ())
        with pytest.raises(ValueError, match="more than one"):
            cp.SkeletonSpec(("a", "b", "c"), ((0, 1), (1, 2)), (), ())

    def test_involution_on_random_pairings(self, rng):
        for _ in range(20):
            p = int(rng.integers(4, 12)) * 2
            order = rng.permutation(p)
            pairs = tuple((int(order[2 * i]), int(order[2 * i + 1])) for i in range(p // 3))
            skel = cp.SkeletonSpec(tuple(f"j{i}" for i in range(p)), pairs, (), ())
            perm = skel.flip_permutation()
            assert [perm[perm[j]] for j in range(p)] == list(range(p))


class TestLoadAnnotations:
    def test_two_valid_records(self, tmp_path):
        path = write_annotation_file(tmp_path / "a.json", [valid_record("a"), valid_record("b")])
        anns = cp.load_annotations(path)
        assert len(anns) == 2
        assert [a.image_id for a in anns] == ["a", "b"]

    def test_empty_array(self, tmp_path):
        path = write_annotation_file(tmp_path / "a.json", [])
        assert cp.load_annotations(path) == []

    def test_zero_head_length_names_field(self, tmp_path):
        record = valid_record()
        record["head_length"] = 0
        path = write_annotation_file(tmp_path / "a.json", [record])
        with pytest.raises(AnnotationError, match="head_length"):
            cp.load_annotations(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(OSError):
            cp.load_annotations(tmp_path / "nope.json")

    def test_malformed_names_record_index(self, tmp_path):
        record = valid_record()
        record["keypoints"] = [[1.0]]
        path = write_annotation_file(tmp_path / "a.json", [valid_record(), record])
        with pytest.raises(AnnotationError, match="record 1"):
            cp.load_annotations(path)

    def test_joint_count_checked_against_skeleton(self, tmp_path, skel):
        path = write_annotation_file(tmp_path / "a.json", [valid_record(p=15)])
        with pytest.raises(AnnotationError, match="keypoints"):
            cp.load_annotations(path, skel)

    def test_order_preserved_and_bbox_optional(self, tmp_path):
        records = [valid_record(f"img{i}") for i in range(5)]
        records[2]["bbox"] = [1.0, 2.0, 30.0, 40.0]
        path = write_annotation_file(tmp_path / "a.json", records)
        anns = cp.load_annotations(path)
        assert [a.image_id for a in anns] == [f"img{i}" for i in range(5)]
        assert anns[2].bbox == (1.0, 2.0, 30.0, 40.0)
        assert anns[0].bbox is None


class TestValidateAnnotation:
    def test_well_formed_record_ok(self, skel):
        assert cp.validate_annotation(make_annotation(), skel) == []

    def test_wrong_keypoint_count(self, skel):
        violations = cp.validate_annotation(make_annotation(p=15), skel)
        assert any("keypoint count" in v for v in violations)

    def test_out_of_bounds_visible_keypoint(self, skel):
        keypoints = [(5.0, 5.0)] * 16
        keypoints[3] = (-3.0, 10.0)
        ann = make_annotation(keypoints=keypoints)
        violations = cp.validate_annotation(ann, skel, image_size=(96, 96))
        assert any("out of bounds" in v for v in violations)

    def test_invisible_keypoints_not_bounds_checked(self, skel):
        keypoints = [(5.0, 5.0)] * 16
        keypoints[3] = (-1.0, -1.0)
        visibility = [True] * 16
        visibility[3] = False
        ann = make_annotation(keypoints=keypoints, visibility=visibility)
        assert cp.validate_annotation(ann, skel, image_size=(96, 96)) == []

    def test_nonpositive_head_length(self, skel):
        violations = cp.validate_annotation(make_annotation(head_length=-1.0), skel)
        assert any("head_length" in v for v in violations)


class TestPredictionRoundTrip:
    def records(self, rng, count=3):
        out = []
        for i in range(count):
            kps = tuple((float(x), float(y)) for x, y in rng.uniform(0, 96, size=(16, 2)))
            scores = tuple(float(s) for s in rng.uniform(0, 1, size=16))
            out.append(cp.PredictionRecord(f"img{i}", kps, scores))
        return out

    def test_save_then_load_identical(self, tmp_path, rng):
        records = self.records(rng)
        path = tmp_path / "preds.json"
        cp.save_predictions(records, path)
        loaded = cp.load_predictions(path)
        assert loaded == records  # exact: coordinates serialized at full precision

    def test_empty_list(self, tmp_path):
        path = tmp_path / "preds.json"
        cp.save_predictions([], path)
        assert json.loads(path.read_text()) == []
        assert cp.load_predictions(path) == []

    def test_zero_score_preserved(self, tmp_path):
        record = cp.PredictionRecord("a", ((1.0, 2.0),), (0.0,))
        path = tmp_path / "preds.json"
        cp.save_predictions([record], path)
        loaded = cp.load_predictions(path)
        assert loaded[0].scores == (0.0,)

    def test_scores_survive_within_tolerance(self, tmp_path, rng):
        records = self.records(rng, count=5)
        path = tmp_path / "preds.json"
        cp.save_predictions(records, path)
        for loaded, original in zip(cp.load_predictions(path), records):
            assert np.allclose(loaded.scores, original.scores, rtol=0, atol=1e-12)

    def test_unwritable_path(self, tmp_path):
        with pytest.raises(OSError):
            cp.save_predictions([], tmp_path / "missing_dir" / "preds.json")


def test_annotation_save_load_round_trip(tmp_path, rng):
    anns = [
        make_annotation("a"),
        make_annotation("b", visibility=[False] + [True] * 15,
                        keypoints=[(-1.0, -1.0)] + [(float(j), 2.0) for j in range(15)]),
    ]
    path = tmp_path / "a.json"
    cp.save_annotations(anns, path)
    assert cp.load_annotations(path) == anns
