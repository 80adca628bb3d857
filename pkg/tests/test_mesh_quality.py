"""Tests for rotation-consistency scoring, labeling, and quality classifiers."""

import math
import random

import numpy as np
import pytest

from handcontact.data_model import BBox, HandSide
from handcontact.errors import AnnotationFormatError, DataError, ReconstructionError
from handcontact.mesh_quality import (
    DEFAULT_ANGLES,
    CentroidReconstructor,
    LabeledItem,
    MeshRecord,
    QualityLabel,
    QualityLabelSet,
    ScoredRecord,
    SerializedReconstructor,
    auroc,
    baseline_gaussian,
    baseline_nb,
    consistency_score,
    load_scored_records,
    make_labels,
    save_scored_records,
    train_quality_mlp,
)
from handcontact.mesh_quality import _back_rotate_points, _rotate_image

from synthdata import (
    BitNoiseReconstructor,
    MarkerReconstructor,
    MeshRecordLike,
    blob_labelset,
    make_marker_crop,
    quality_bit_crops,
    read_quality_flag,
)


def joints_at(points):
    return np.asarray(points, dtype=float)


class TestMeshRecord:
    def test_valid(self):
        rec = MeshRecord(theta=np.zeros(45), joints_2d=np.zeros((21, 2)), side=HandSide.LEFT)
        assert rec.joint_count == 21
        assert rec.theta.shape == (45,)
        assert rec.beta is None

    def test_arrays_are_read_only(self):
        rec = MeshRecord(theta=np.zeros(3), joints_2d=np.zeros((2, 2)), side=HandSide.RIGHT)
        with pytest.raises(ValueError):
            rec.theta[0] = 1.0

    def test_bad_shapes(self):
        with pytest.raises(DataError):
            MeshRecord(theta=np.zeros((2, 2)), joints_2d=np.zeros((2, 2)), side=HandSide.LEFT)
        with pytest.raises(DataError):
            MeshRecord(theta=np.zeros(3), joints_2d=np.zeros((2, 3)), side=HandSide.LEFT)
        with pytest.raises(DataError):
            MeshRecord(theta=np.zeros(0), joints_2d=np.zeros((2, 2)), side=HandSide.LEFT)

    def test_non_finite(self):
        with pytest.raises(DataError):
            MeshRecord(theta=np.array([np.nan]), joints_2d=np.zeros((1, 2)), side=HandSide.LEFT)
        with pytest.raises(DataError):
            MeshRecord(theta=np.zeros(2), joints_2d=np.full((1, 2), np.inf), side=HandSide.LEFT)
        with pytest.raises(DataError):
            MeshRecord(theta=np.zeros(2), joints_2d=np.zeros((1, 2)), side=HandSide.LEFT,
                       beta=np.array([np.nan]))


class TestRotationConvention:
    def test_back_rotation_inverts_forward_map(self):
        rng = np.random.RandomState(0)
        for angle in (10.0, 33.7, -20.0, 90.0, 180.0, 270.0, 144.0):
            pts = rng.uniform(-30.0, 30.0, (8, 2)) + 45.5
            c = 45.5
            rad = math.radians(angle)
            co, si = math.cos(rad), math.sin(rad)
            dx, dy = pts[:, 0] - c, pts[:, 1] - c
            fwd = np.stack([co * dx + si * dy + c, -si * dx + co * dy + c], axis=1)
            back = _back_rotate_points(fwd, angle, c)
            assert np.allclose(back, pts, atol=1e-9)

    def test_rot90_matches_point_map(self):
        img = np.zeros((9, 9), dtype=np.uint8)
        img[2, 5] = 255  # (x, y) = (5, 2)
        out = _rotate_image(img, 90.0)
        ys, xs = np.nonzero(out == 255)
        # forward map: (x, y) -> (y, S - 1 - x)
        assert (xs[0], ys[0]) == (2, 9 - 1 - 5)

    def test_interpolated_rotation_matches_point_map(self):
        size = 41
        img = np.zeros((size, size), dtype=np.float32)
        img[12, 25] = 1.0
        angle = 17.0
        out = _rotate_image(img, angle)
        total = out.sum()
        ys, xs = np.mgrid[0:size, 0:size]
        cx = float((out * xs).sum() / total)
        cy = float((out * ys).sum() / total)
        c = (size - 1) / 2.0
        rad = math.radians(angle)
        co, si = math.cos(rad), math.sin(rad)
        ex = co * (25 - c) + si * (12 - c) + c
        ey = -si * (25 - c) + co * (12 - c) + c
        # interpolation weights are fixed-point, so allow a small quantization error
        assert math.hypot(cx - ex, cy - ey) < 0.1


class _SequenceStub:
    """Returns canned joint sets, one per call, all in the rotated frame's center."""

    def __init__(self, joint_sets, theta_dim=3):
        self._sets = [np.asarray(j, dtype=float) for j in joint_sets]
        self._calls = 0
        self._theta_dim = theta_dim

    def __call__(self, crop, side):
        h, w = crop.shape[:2]
        center = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
        joints = self._sets[self._calls % len(self._sets)] + center
        self._calls += 1
        return MeshRecord(theta=np.zeros(self._theta_dim), joints_2d=joints, side=side)


class TestConsistencyScore:
    def test_exact_equivariance_is_zero(self):
        crop = make_marker_crop(random.Random(9), flag=0)
        score = consistency_score(crop, HandSide.LEFT, MarkerReconstructor(),
                                  angles=(90.0, 180.0, 270.0))
        assert score < 1e-6

    def test_center_stub_is_zero_under_default_angles(self):
        crop = make_marker_crop(random.Random(2), flag=0)
        recon = BitNoiseReconstructor(seed=1, sigma_good=0.0)
        assert consistency_score(crop, HandSide.RIGHT, recon, DEFAULT_ANGLES) == 0.0

    def test_single_pair_closed_form(self):
        # both angles reduce to the identity rotation, so the two joint sets
        # differ by exactly (3, 4) in the original frame
        stub = _SequenceStub([np.zeros((5, 2)), np.tile([3.0, 4.0], (5, 1))])
        crop = np.zeros((40, 80, 3), dtype=np.uint8)
        score = consistency_score(crop, HandSide.LEFT, stub, angles=(360.0, 720.0))
        assert score == pytest.approx(5.0 / math.hypot(80.0, 40.0), abs=1e-12)

    def test_pair_average_three_copies(self):
        # copies at offsets 0, d, 2d: pairwise distances d, d, 2d -> mean 4d/3
        d = np.array([1.0, 0.0])
        stub = _SequenceStub([np.zeros((2, 2)), np.tile(d, (2, 1)), np.tile(2 * d, (2, 1))])
        crop = np.zeros((30, 30), dtype=np.uint8)
        score = consistency_score(crop, HandSide.LEFT, stub, angles=(360.0, 720.0, 1080.0))
        assert score == pytest.approx((4.0 / 3.0) / math.hypot(30.0, 30.0), abs=1e-12)

    def test_monotone_in_noise_scale(self):
        rng = random.Random(5)
        means = []
        for sigma in (0.01, 0.05, 0.1):
            recon = BitNoiseReconstructor(seed=11, sigma_good=sigma)
            trials = [
                consistency_score(make_marker_crop(rng, flag=0), HandSide.RIGHT, recon,
                                  angles=(90.0, 180.0, 270.0))
                for _ in range(100)
            ]
            means.append(sum(trials) / len(trials))
        assert means[0] < means[1] < means[2]

    def test_noise_floor_separates_flags(self):
        rng = random.Random(7)
        recon = BitNoiseReconstructor(seed=3)
        good = consistency_score(make_marker_crop(rng, flag=0), HandSide.RIGHT, recon)
        bad = consistency_score(make_marker_crop(rng, flag=1), HandSide.RIGHT, recon)
        assert bad > 10.0 * good

    def test_needs_two_angles(self):
        crop = np.zeros((10, 10, 3), dtype=np.uint8)
        with pytest.raises(DataError):
            consistency_score(crop, HandSide.LEFT, MarkerReconstructor(), angles=(90.0,))

    def test_bad_crop_shape(self):
        with pytest.raises(DataError):
            consistency_score(np.zeros((0, 4, 3), dtype=np.uint8), HandSide.LEFT,
                              MarkerReconstructor())

    def test_failure_carries_angle(self):
        # interpolating rotations blur the single-pixel markers away
        crop = make_marker_crop(random.Random(1), flag=0)
        with pytest.raises(ReconstructionError) as err:
            consistency_score(crop, HandSide.LEFT, MarkerReconstructor(), angles=(10.0, 20.0))
        assert err.value.angle_deg == 10.0

    def test_joint_count_mismatch(self):
        stub = _SequenceStub([np.zeros((5, 2)), np.zeros((4, 2))])
        with pytest.raises(DataError):
            consistency_score(np.zeros((20, 20), dtype=np.uint8), HandSide.LEFT, stub,
                              angles=(360.0, 720.0))

    def test_serialized_wrapper_passthrough(self):
        crop = make_marker_crop(random.Random(4), flag=0)
        plain = consistency_score(crop, HandSide.LEFT, MarkerReconstructor(),
                                  angles=(90.0, 180.0))
        wrapped = consistency_score(crop, HandSide.LEFT,
                                    SerializedReconstructor(MarkerReconstructor()),
                                    angles=(90.0, 180.0))
        assert plain == wrapped


class TestMakeLabels:
    def test_ten_items_three_three_four(self):
        scored = [(f"item{i}", s) for i, s in enumerate([0.5, 0.1, 0.9, 0.3, 0.7,
                                                         0.2, 0.8, 0.4, 0.6, 0.05])]
        labels = make_labels(scored)
        counts = labels.counts()
        assert counts[QualityLabel.POSITIVE] == 3
        assert counts[QualityLabel.NEGATIVE] == 3
        assert counts[QualityLabel.UNLABELED] == 4
        positive = {it.item for it in labels.with_label(QualityLabel.POSITIVE)}
        negative = {it.item for it in labels.with_label(QualityLabel.NEGATIVE)}
        assert positive == {"item9", "item1", "item5"}  # three smallest scores
        assert negative == {"item2", "item6", "item4"}  # three largest scores

    def test_single_item_unlabeled(self):
        labels = make_labels([("only", 0.4)])
        assert labels.items[0].label is QualityLabel.UNLABELED

    def test_ties_resolved_by_input_order(self):
        labels = make_labels([(i, 1.0) for i in range(10)])
        got = [it.label for it in labels]
        assert got[:3] == [QualityLabel.POSITIVE] * 3
        assert got[-3:] == [QualityLabel.NEGATIVE] * 3
        assert got[3:7] == [QualityLabel.UNLABELED] * 4

    def test_preserves_input_order(self):
        scored = [("a", 0.9), ("b", 0.1), ("c", 0.5)]
        labels = make_labels(scored, top_frac=1 / 3, bottom_frac=1 / 3)
        assert [it.item for it in labels] == ["a", "b", "c"]
        assert [it.consistency for it in labels] == [0.9, 0.1, 0.5]
        assert [it.label for it in labels] == [
            QualityLabel.NEGATIVE, QualityLabel.POSITIVE, QualityLabel.UNLABELED]

    def test_score_ordering_property(self):
        rng = random.Random(13)
        for _ in range(25):
            n = rng.randrange(1, 40)
            scored = [(i, rng.choice([0.0, 0.25, 0.5, rng.random()])) for i in range(n)]
            labels = make_labels(scored)
            pos = [it.consistency for it in labels.with_label(QualityLabel.POSITIVE)]
            mid = [it.consistency for it in labels.with_label(QualityLabel.UNLABELED)]
            neg = [it.consistency for it in labels.with_label(QualityLabel.NEGATIVE)]
            if pos and mid:
                assert max(pos) <= min(mid)
            if mid and neg:
                assert max(mid) <= min(neg)
            if pos and neg:
                assert max(pos) <= min(neg)

    def test_halves_cover_everything(self):
        labels = make_labels([(i, float(i)) for i in range(4)],
                             top_frac=0.5, bottom_frac=0.5)
        counts = labels.counts()
        assert counts[QualityLabel.POSITIVE] == 2
        assert counts[QualityLabel.NEGATIVE] == 2
        assert counts[QualityLabel.UNLABELED] == 0

    def test_invalid_inputs(self):
        with pytest.raises(DataError):
            make_labels([])
        with pytest.raises(DataError):
            make_labels([("a", 0.1)], top_frac=-0.1)
        with pytest.raises(DataError):
            make_labels([("a", 0.1)], top_frac=0.6, bottom_frac=0.6)
        with pytest.raises(DataError):
            make_labels([("a", float("nan"))])


class TestClassifiers:
    def test_mlp_separable_blobs(self):
        labels, held_theta, held_labels = blob_labelset(seed=0)
        clf = train_quality_mlp(labels, seed=0)
        assert auroc(clf.probabilities(held_theta), held_labels) >= 0.99

    def test_nb_separable_blobs(self):
        labels, held_theta, held_labels = blob_labelset(seed=1)
        clf = baseline_nb(labels)
        assert auroc(clf.probabilities(held_theta), held_labels) >= 0.95

    def test_flipped_labels_mirror_auroc(self):
        labels, held_theta, held_labels = blob_labelset(seed=2)
        flipped = QualityLabelSet(tuple(
            LabeledItem(it.item, it.consistency,
                        QualityLabel.NEGATIVE if it.label is QualityLabel.POSITIVE
                        else QualityLabel.POSITIVE)
            for it in labels))
        a = auroc(train_quality_mlp(labels, seed=0).probabilities(held_theta), held_labels)
        b = auroc(train_quality_mlp(flipped, seed=0).probabilities(held_theta), held_labels)
        assert abs(b - (1.0 - a)) < 0.02

    def test_single_class_rejected(self):
        items = tuple(LabeledItem(MeshRecordLike(np.ones(4) * i), float(i),
                                  QualityLabel.POSITIVE) for i in range(5))
        with pytest.raises(DataError):
            train_quality_mlp(QualityLabelSet(items))
        with pytest.raises(DataError):
            baseline_nb(QualityLabelSet(items))

    def test_unlabeled_only_rejected(self):
        items = tuple(LabeledItem(MeshRecordLike(np.ones(4)), 0.5,
                                  QualityLabel.UNLABELED) for _ in range(5))
        with pytest.raises(DataError):
            train_quality_mlp(QualityLabelSet(items))

    def test_deterministic_and_round_trips(self, tmp_path):
        labels, held_theta, _ = blob_labelset(seed=3)
        a = train_quality_mlp(labels, seed=7).probabilities(held_theta)
        b = train_quality_mlp(labels, seed=7).probabilities(held_theta)
        assert np.array_equal(a, b)
        clf = train_quality_mlp(labels, seed=7)
        path = tmp_path / "quality.pkl"
        clf.save(path)
        from handcontact.mesh_quality import ThetaClassifier
        loaded = ThetaClassifier.load(path)
        assert np.array_equal(clf.probabilities(held_theta), loaded.probabilities(held_theta))
        with pytest.raises(DataError):
            ThetaClassifier.load(tmp_path / "missing.pkl")

    def test_gaussian_peak_at_mean(self):
        rs = np.random.RandomState(4)
        X = rs.standard_normal((200, 6)) * 2.0 + 1.0
        scorer = baseline_gaussian(X)
        at_mean = scorer.log_likelihood(scorer.mean[None, :])[0]
        assert (scorer.log_likelihood(X) <= at_mean + 1e-12).all()

    def test_gaussian_regularization_handles_constant_column(self):
        rs = np.random.RandomState(5)
        X = rs.standard_normal((50, 3))
        X[:, 1] = 2.5  # zero variance without the ridge
        scorer = baseline_gaussian(X)
        assert np.isfinite(scorer.log_likelihood(X)).all()

    def test_gaussian_needs_two_rows(self):
        with pytest.raises(DataError):
            baseline_gaussian(np.ones((1, 3)))


class TestAuroc:
    def test_frozen_example(self):
        assert auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75

    def test_perfect_and_inverted(self):
        assert auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
        assert auroc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0

    def test_all_ties_half(self):
        assert auroc([0.5, 0.5, 0.5, 0.5], [0, 1, 0, 1]) == 0.5

    def test_matches_pairwise_count(self):
        rng = random.Random(17)
        for _ in range(50):
            n = rng.randrange(2, 30)
            labels = [rng.randrange(2) for _ in range(n)]
            if len(set(labels)) < 2:
                labels[0], labels[1] = 0, 1
            scores = [float(rng.randrange(6)) for _ in range(n)]  # integer scores force ties
            wins = 0.0
            pairs = 0
            for i in range(n):
                for j in range(n):
                    if labels[i] == 1 and labels[j] == 0:
                        pairs += 1
                        if scores[i] > scores[j]:
                            wins += 1.0
                        elif scores[i] == scores[j]:
                            wins += 0.5
            assert auroc(scores, labels) == pytest.approx(wins / pairs, abs=1e-12)

    def test_invariant_under_monotone_transform(self):
        rng = np.random.RandomState(3)
        scores = rng.standard_normal(40)
        labels = (rng.random_sample(40) < 0.4).astype(int)
        labels[:2] = [0, 1]
        assert auroc(np.exp(scores), labels) == pytest.approx(auroc(scores, labels), abs=1e-12)

    def test_errors(self):
        with pytest.raises(DataError):
            auroc([0.1, 0.2], [1, 1])
        with pytest.raises(DataError):
            auroc([0.1], [0, 1])
        with pytest.raises(DataError):
            auroc([float("nan"), 0.2], [0, 1])
        with pytest.raises(DataError):
            auroc([0.1, 0.2], [0, 2])


class TestHiddenBitPipeline:
    def test_scores_labels_and_classifier_recover_the_bit(self):
        recon = BitNoiseReconstructor(seed=3)
        crops, flags = quality_bit_crops(seed=42, n=150)
        scores = [consistency_score(c, HandSide.RIGHT, recon, angles=(90.0, 180.0, 270.0))
                  for c in crops]
        records = [recon(c, HandSide.RIGHT) for c in crops]
        n_train = 100
        labels = make_labels(list(zip(records[:n_train], scores[:n_train])))
        for it, flag in zip(labels, flags):
            if it.label is QualityLabel.POSITIVE:
                assert flag == 0
            elif it.label is QualityLabel.NEGATIVE:
                assert flag == 1
        clf = train_quality_mlp(labels, seed=0)
        held_theta = np.stack([r.theta for r in records[n_train:]])
        held_good = np.array([1 - f for f in flags[n_train:]])
        a_mlp = auroc(clf.probabilities(held_theta), held_good)
        scorer = baseline_gaussian(np.stack([r.theta for r in records[:n_train]]))
        a_gauss = auroc(scorer.log_likelihood(held_theta), held_good)
        assert a_mlp >= 0.9
        assert a_gauss <= a_mlp - 0.15

    def test_pipeline_is_deterministic(self):
        def run():
            recon = BitNoiseReconstructor(seed=3)
            crops, flags = quality_bit_crops(seed=8, n=60)
            scores = [consistency_score(c, HandSide.RIGHT, recon,
                                        angles=(90.0, 180.0, 270.0)) for c in crops]
            records = [recon(c, HandSide.RIGHT) for c in crops]
            labels = make_labels(list(zip(records, scores)))
            clf = train_quality_mlp(labels, seed=1)
            return clf.probabilities(np.stack([r.theta for r in records]))

        assert np.array_equal(run(), run())

    def test_flag_survives_rotation(self):
        rng = random.Random(33)
        from handcontact.mesh_quality import _pad_to_rotation_safe, _rotate_image
        for flag in (0, 1):
            crop = make_marker_crop(rng, flag=flag)
            padded, _, _ = _pad_to_rotation_safe(crop)
            for angle in (90.0, 180.0, 17.0, -28.0):
                assert read_quality_flag(_rotate_image(padded, angle)) == flag


class TestCentroidReconstructor:
    def test_deterministic_and_well_formed(self):
        rng = np.random.RandomState(0)
        crop = rng.randint(0, 255, (60, 48, 3), dtype=np.uint8)
        recon = CentroidReconstructor()
        a = recon(crop, HandSide.RIGHT)
        b = recon(crop, HandSide.RIGHT)
        assert np.array_equal(a.theta, b.theta)
        assert np.array_equal(a.joints_2d, b.joints_2d)
        assert a.theta.shape == (45,)
        assert a.joints_2d.shape == (21, 2)

    def test_left_is_mirrored_right(self):
        rng = np.random.RandomState(1)
        crop = rng.randint(0, 255, (40, 52, 3), dtype=np.uint8)
        recon = CentroidReconstructor()
        right = recon(crop, HandSide.RIGHT)
        left = recon(crop[:, ::-1], HandSide.LEFT)
        w = crop.shape[1]
        assert np.allclose(left.joints_2d[:, 0], (w - 1) - right.joints_2d[:, 0], atol=1e-9)
        assert np.allclose(left.joints_2d[:, 1], right.joints_2d[:, 1], atol=1e-9)

    def test_grayscale_input(self):
        crop = np.full((30, 30), 128, dtype=np.uint8)
        rec = CentroidReconstructor()(crop, HandSide.RIGHT)
        assert np.isfinite(rec.joints_2d).all()


class TestScoredRecords:
    def _records(self):
        return [
            ScoredRecord(image_id="vid_001", box=BBox(1.0, 2.0, 30.0, 40.0),
                         side=HandSide.LEFT, consistency=0.125,
                         theta=(0.5, -1.25, 3.0), label=QualityLabel.POSITIVE),
            ScoredRecord(image_id="vid_002", box=BBox(5.5, 6.25, 20.0, 22.0),
                         side=HandSide.RIGHT, consistency=0.875,
                         theta=(0.0, 0.1, -0.2), label=QualityLabel.UNLABELED),
        ]

    def test_round_trip(self, tmp_path):
        path = tmp_path / "scored.jsonl"
        records = self._records()
        save_scored_records(records, path)
        assert load_scored_records(path) == records

    def test_round_trip_is_byte_identical(self, tmp_path):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        save_scored_records(self._records(), a)
        save_scored_records(load_scored_records(a), b)
        assert a.read_bytes() == b.read_bytes()

    def test_load_errors_carry_line_numbers(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"image_id": "a"}\n')
        with pytest.raises(AnnotationFormatError) as err:
            load_scored_records(path)
        assert err.value.line == 1
        path.write_text("not json\n")
        with pytest.raises(AnnotationFormatError):
            load_scored_records(path)

    def test_bad_label_value(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"image_id": "a", "box": [0, 0, 1, 1], "side": 0, '
                        '"consistency": 0.5, "theta": [1.0], "label": "great"}\n')
        with pytest.raises(AnnotationFormatError) as err:
            load_scored_records(path)
        assert err.value.line == 1

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            load_scored_records(tmp_path / "nope.jsonl")

    def test_validation(self):
        with pytest.raises(DataError):
            ScoredRecord(image_id="x", box=BBox(0, 0, 1, 1), side=HandSide.LEFT,
                         consistency=-0.5, theta=(1.0,))
        with pytest.raises(DataError):
            ScoredRecord(image_id="x", box=BBox(0, 0, 1, 1), side=HandSide.LEFT,
                         consistency=0.5, theta=())
