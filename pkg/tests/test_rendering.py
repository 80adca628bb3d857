"""Unit tests for the drawing helpers."""

import numpy as np
import pytest

from handcontact import rendering
from handcontact.association import ImageParse
from handcontact.data_model import BBox, ContactState, HandSide
from handcontact.errors import DataError
from handcontact.evaluation import EvalCriterion, PRCurve

from synthdata import mining_parse


def blank(size=48, value=0):
    return np.full((size, size, 3), value, dtype=np.uint8)


class TestRenderParse:
    def test_empty_parse_is_identity(self):
        img = blank(value=123)
        parse = ImageParse(image_id="x", width=48, height=48, hands=(), objects=())
        out = rendering.render_parse(img, parse)
        assert np.array_equal(out, img)
        assert out is not img

    def test_side_colors_differ(self):
        left = mining_parse("l", [(BBox(4, 4, 40, 40), ContactState.NO_CONTACT, None)])
        left_hand = left.hands[0]
        object.__setattr__(left_hand, "side", HandSide.LEFT)
        out = rendering.render_parse(blank(), left)
        assert np.all(out == np.array(rendering.LEFT_HAND_COLOR), axis=-1).any()

        right = mining_parse("r", [(BBox(4, 4, 40, 40), ContactState.NO_CONTACT, None)])
        out = rendering.render_parse(blank(), right)
        assert np.all(out == np.array(rendering.RIGHT_HAND_COLOR), axis=-1).any()

    def test_object_box_drawn(self):
        parse = mining_parse("o", [], objects=[BBox(10, 10, 30, 30)], size=48)
        out = rendering.render_parse(blank(), parse)
        mask = np.all(out == np.array(rendering.OBJECT_COLOR), axis=-1)
        assert mask[10, 10] or mask[10, 11]

    def test_deterministic(self):
        parse = mining_parse(
            "d", [(BBox(4, 4, 24, 24), ContactState.PORTABLE_OBJECT, 0)],
            objects=[BBox(20, 20, 44, 44)], size=48)
        a = rendering.render_parse(blank(), parse)
        b = rendering.render_parse(blank(), parse)
        assert np.array_equal(a, b)

    def test_input_validation(self):
        parse = ImageParse(image_id="x", width=8, height=8, hands=(), objects=())
        with pytest.raises(DataError):
            rendering.render_parse(np.zeros((8, 8), dtype=np.uint8), parse)
        with pytest.raises(DataError):
            rendering.render_parse(np.zeros((8, 8, 3)), parse)
        full = mining_parse("x", [(BBox(1, 1, 6, 6), ContactState.NO_CONTACT, None)], size=8)
        with pytest.raises(DataError):
            rendering.render_parse(blank(8), full, line_width=0)


class TestRenderPrCurves:
    def _results(self):
        high = PRCurve(precision=np.array([1.0, 1.0]), recall=np.array([0.5, 1.0]),
                       ap=1.0, n_pos=2)
        low = PRCurve(precision=np.array([0.5, 0.5]), recall=np.array([0.5, 1.0]),
                      ap=0.5, n_pos=2)
        return {EvalCriterion.HAND: high, EvalCriterion.ALL: low}

    def test_canvas_size_and_content(self):
        out = rendering.render_pr_curves(self._results(), size=(320, 240))
        assert out.shape == (240, 320, 3)
        # at least one curve pixel in the hand criterion's color
        assert np.all(out == np.array(rendering.CURVE_COLORS[EvalCriterion.HAND]),
                      axis=-1).any()

    def test_deterministic(self):
        a = rendering.render_pr_curves(self._results())
        b = rendering.render_pr_curves(self._results())
        assert np.array_equal(a, b)

    def test_size_validation(self):
        with pytest.raises(DataError):
            rendering.render_pr_curves(self._results(), size=(50, 50))


class TestImageIO:
    def test_round_trip(self, tmp_path):
        rng = np.random.RandomState(0)
        img = rng.randint(0, 255, (20, 30, 3), dtype=np.uint8)
        rendering.save_image(img, tmp_path / "x.png")
        assert np.array_equal(rendering.load_image(tmp_path / "x.png"), img)

    def test_loaded_array_is_writable(self, tmp_path):
        rendering.save_image(blank(8), tmp_path / "x.png")
        out = rendering.load_image(tmp_path / "x.png")
        out[0, 0] = (1, 2, 3)

    def test_missing_and_corrupt(self, tmp_path):
        with pytest.raises(DataError):
            rendering.load_image(tmp_path / "missing.png")
        (tmp_path / "bad.png").write_bytes(b"not a png")
        with pytest.raises(DataError):
            rendering.load_image(tmp_path / "bad.png")
