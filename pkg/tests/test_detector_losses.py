import math

import pytest
import torch

from handcontact.data_model import BBox, ContactState, HandAnnotation, HandSide, ImageRecord
from handcontact.detector.losses import (
    LossWeights,
    RoiOutputs,
    compute_losses,
    loss_classification,
    loss_magnitude,
    loss_orientation,
)
from handcontact.detector.targets import encode_offset
from handcontact.errors import DataError


def central_fd(fn, x, h=1e-4):
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        hi = fn(x).item()
        flat[i] = orig - h
        lo = fn(x).item()
        flat[i] = orig
        g[i] = (hi - lo) / (2 * h)
    return grad


def rel_err(a, b):
    denom = max(a.abs().max().item(), b.abs().max().item(), 1e-8)
    return (a - b).abs().max().item() / denom


class TestEncodeOffset:
    def test_axis_aligned(self):
        t = encode_offset(BBox(0, 0, 10, 10), BBox(20, 0, 30, 10), (100, 100))
        assert t.valid
        assert t.dir == (1.0, 0.0)
        assert t.mag == pytest.approx(20 / math.hypot(100, 100), abs=1e-12)

    def test_coincident_centers(self):
        t = encode_offset(BBox(0, 0, 10, 10), BBox(0, 0, 10, 10), (100, 100))
        assert not t.valid
        assert t.dir == (1.0, 0.0) and t.mag == 0.0

    def test_straight_down(self):
        t = encode_offset(BBox(0, 0, 10, 10), BBox(0, 30, 10, 40), (100, 100))
        assert t.dir == (0.0, 1.0)
        assert t.mag == pytest.approx(30 / math.hypot(100, 100), abs=1e-12)

    def test_degenerate_image(self):
        with pytest.raises(DataError):
            encode_offset(BBox(0, 0, 1, 1), BBox(2, 2, 3, 3), (0, 100))

    def test_unit_norm(self):
        import random
        rng = random.Random(1)
        for _ in range(50):
            a = BBox(rng.uniform(0, 50), rng.uniform(0, 50), rng.uniform(51, 99), rng.uniform(51, 99))
            b = BBox(rng.uniform(0, 50), rng.uniform(0, 50), rng.uniform(51, 99), rng.uniform(51, 99))
            t = encode_offset(a, b, (100, 100))
            if t.valid:
                assert math.hypot(*t.dir) == pytest.approx(1.0, abs=1e-12)


class TestLossOps:
    def test_orientation_values(self):
        v = torch.tensor([1.0, 0.0], dtype=torch.float64)
        assert loss_orientation(v, v).item() == 0.0
        assert loss_orientation(v, torch.tensor([0.0, 1.0], dtype=torch.float64)).item() == 2.0
        assert loss_orientation(v, torch.tensor([-1.0, 0.0], dtype=torch.float64)).item() == 4.0

    def test_orientation_symmetric_and_bounded(self):
        g = torch.Generator().manual_seed(0)
        for _ in range(50):
            theta = torch.rand(2, generator=g, dtype=torch.float64) * 2 * math.pi
            a = torch.stack([theta[0].cos(), theta[0].sin()])
            b = torch.stack([theta[1].cos(), theta[1].sin()])
            ab = loss_orientation(a, b).item()
            assert ab == pytest.approx(loss_orientation(b, a).item(), abs=1e-12)
            assert -1e-12 <= ab <= 4 + 1e-12

    def test_magnitude_values(self):
        m = torch.tensor(0.5, dtype=torch.float64)
        assert loss_magnitude(m, m).item() == 0.0
        assert loss_magnitude(m, torch.tensor(0.2, dtype=torch.float64)).item() == pytest.approx(0.09)
        assert loss_magnitude(torch.tensor(0.0), torch.tensor(1.0)).item() == 1.0

    def test_classification_values(self):
        logits = torch.tensor([30.0, -30.0], dtype=torch.float64)
        assert loss_classification(logits, torch.tensor(0)).item() == pytest.approx(0.0, abs=1e-8)
        uniform5 = torch.zeros(5, dtype=torch.float64)
        assert loss_classification(uniform5, torch.tensor(3)).item() == pytest.approx(math.log(5), abs=1e-12)
        uniform2 = torch.zeros(2, dtype=torch.float64)
        assert loss_classification(uniform2, torch.tensor(1)).item() == pytest.approx(math.log(2), abs=1e-12)

    def test_classification_bad_label(self):
        with pytest.raises(Exception):
            loss_classification(torch.zeros(2), torch.tensor(5)).item()


class TestGradients:
    def test_orientation_grad(self):
        g = torch.Generator().manual_seed(1)
        for _ in range(30):
            theta = torch.rand((), generator=g, dtype=torch.float64) * 2 * math.pi
            v = torch.stack([theta.cos(), theta.sin()]).requires_grad_(True)
            target = torch.randn(2, generator=g, dtype=torch.float64)
            target = target / target.norm()
            loss_orientation(v, target).backward()
            fd = central_fd(lambda x: loss_orientation(x, target), v.detach().clone())
            assert rel_err(v.grad, fd) < 1e-3

    def test_magnitude_grad(self):
        g = torch.Generator().manual_seed(2)
        for _ in range(30):
            m = (torch.rand((), generator=g, dtype=torch.float64)).requires_grad_(True)
            t = torch.rand((), generator=g, dtype=torch.float64)
            loss_magnitude(m, t).backward()
            fd = central_fd(lambda x: loss_magnitude(x, t), m.detach().clone().reshape(1)).reshape(())
            assert rel_err(m.grad, fd) < 1e-3

    def test_classification_grad(self):
        g = torch.Generator().manual_seed(3)
        for k in (2, 5):
            for _ in range(15):
                logits = torch.randn(k, generator=g, dtype=torch.float64).requires_grad_(True)
                label = torch.randint(0, k, (), generator=g)
                loss_classification(logits, label).backward()
                fd = central_fd(lambda x: loss_classification(x, label), logits.detach().clone())
                assert rel_err(logits.grad, fd) < 1e-3


def contacted_record():
    hand = HandAnnotation(box=BBox(0, 0, 10, 10), side=HandSide.RIGHT,
                          state=ContactState.PORTABLE_OBJECT, object_index=0)
    return ImageRecord(image_id="a", uploader_id="u", width=100, height=100,
                       hands=(hand,), objects=(BBox(20, 0, 30, 10),))


def outputs_for(matched, side_logits, state_logits, offset_dir, offset_mag):
    return RoiOutputs(
        side_logits=torch.tensor(side_logits, dtype=torch.float32).reshape(-1, 2),
        state_logits=torch.tensor(state_logits, dtype=torch.float32).reshape(-1, 5),
        offset_dir=torch.tensor(offset_dir, dtype=torch.float32).reshape(-1, 2),
        offset_mag=torch.tensor(offset_mag, dtype=torch.float32).reshape(-1),
        matched_hand=torch.tensor(matched, dtype=torch.int64),
    )


class TestComputeLosses:
    def test_no_hands(self):
        record = ImageRecord(image_id="a", uploader_id="u", width=100, height=100)
        out = outputs_for([-1, -1], [[1.0, 0.0]] * 2, [[0.2] * 5] * 2, [[1.0, 0.0]] * 2, [0.1, 0.2])
        ld = compute_losses(out, record)
        assert ld.l_side.item() == 0.0 and ld.l_state.item() == 0.0
        assert ld.l_ori.item() == 0.0 and ld.l_mag.item() == 0.0
        assert ld.total.item() == 0.0

    def test_perfect_predictions(self):
        record = contacted_record()
        target = encode_offset(record.hands[0].box, record.objects[0], (100, 100))
        out = outputs_for(
            [0],
            [[-40.0, 40.0]],
            [[-40.0, -40.0, -40.0, 40.0, -40.0]],
            [list(target.dir)],
            [target.mag],
        )
        ld = compute_losses(out, record)
        assert ld.l_side.item() == pytest.approx(0.0, abs=1e-8)
        assert ld.l_state.item() == pytest.approx(0.0, abs=1e-8)
        assert ld.l_ori.item() == 0.0
        assert ld.l_mag.item() == 0.0

    def test_orthogonal_direction(self):
        record = contacted_record()  # true direction (1, 0)
        target = encode_offset(record.hands[0].box, record.objects[0], (100, 100))
        out = outputs_for([0], [[0.0, 0.0]], [[0.0] * 5], [[0.0, 1.0]], [target.mag])
        ld = compute_losses(out, record)
        assert ld.l_ori.item() == pytest.approx(2.0, abs=1e-6)
        assert ld.l_mag.item() == 0.0

    def test_unmatched_rois_do_not_change_aux(self):
        record = contacted_record()
        base = outputs_for([0], [[0.3, 0.4]], [[0.1, 0.5, 0.2, 0.9, 0.3]], [[0.5, 0.5]], [0.3])
        padded = outputs_for(
            [0, -1, -1],
            [[0.3, 0.4], [5.0, -5.0], [1.0, 1.0]],
            [[0.1, 0.5, 0.2, 0.9, 0.3], [1.0] * 5, [2.0] * 5],
            [[0.5, 0.5], [9.0, 9.0], [-1.0, 0.0]],
            [0.3, 7.0, -2.0],
        )
        a = compute_losses(base, record)
        b = compute_losses(padded, record)
        for name in ("l_side", "l_state", "l_ori", "l_mag"):
            assert getattr(a, name).item() == getattr(b, name).item()

    def test_zero_weights_reported_but_excluded(self):
        record = contacted_record()
        out = outputs_for([0], [[0.3, 0.4]], [[0.1, 0.5, 0.2, 0.9, 0.3]], [[0.0, 1.0]], [0.3])
        ld = compute_losses(out, record, weights=LossWeights(side=0.0, state=0.0, ori=0.0, mag=0.0))
        assert ld.l_ori.item() > 0 and ld.l_state.item() > 0
        assert ld.total.item() == ld.l_det.item() == 0.0

    def test_no_contact_hand_masks_offset(self):
        hand = HandAnnotation(box=BBox(0, 0, 10, 10), side=HandSide.LEFT,
                              state=ContactState.NO_CONTACT)
        record = ImageRecord(image_id="a", uploader_id="u", width=100, height=100, hands=(hand,))
        out = outputs_for([0], [[0.0, 0.0]], [[0.0] * 5], [[0.0, 1.0]], [0.9])
        ld = compute_losses(out, record)
        assert ld.l_ori.item() == 0.0 and ld.l_mag.item() == 0.0
        assert ld.l_side.item() > 0

    def test_total_composition(self):
        record = contacted_record()
        out = outputs_for([0], [[0.3, 0.4]], [[0.1, 0.5, 0.2, 0.9, 0.3]], [[0.0, 1.0]], [0.3])
        w = LossWeights(side=0.5, state=0.25, ori=2.0, mag=4.0)
        l_det = torch.tensor(1.5)
        ld = compute_losses(out, record, weights=w, l_det=l_det)
        expected = (1.5 + 0.5 * ld.l_side + 0.25 * ld.l_state + 2.0 * ld.l_ori + 4.0 * ld.l_mag)
        assert ld.total.item() == pytest.approx(expected.item(), rel=1e-6)
