import math
from typing import NamedTuple

import numpy as np
import pytest
from pydantic import ValidationError
from streetnav.exceptions import DomainError
from streetnav.objectives import (
    AlignmentSample,
    BBox,
    derangement,
    iou,
    loss_bbox,
    loss_flag,
    loss_recon,
    loss_wpts,
    swap_negatives,
    total_loss,
)


def samples(n: int):
    return [
        AlignmentSample(instruction_id=f"i{k}", observation_id=f"o{k}", label=1)
        for k in range(n)
    ]


class TestRegressionLosses:
    def test_equal_is_zero(self, rng):
        gt = rng.normal(size=(5, 4))
        assert loss_wpts(gt, gt) == 0.0

    def test_unit_offset(self, rng):
        gt = rng.normal(size=(5, 4))
        assert loss_wpts(gt + 1.0, gt) == pytest.approx(1.0)

    def test_matches_loop(self, rng):
        pred, gt = rng.normal(size=(2, 5, 4))
        expected = sum(abs(a - b) for a, b in zip(pred.ravel(), gt.ravel())) / 20
        assert abs(loss_wpts(pred, gt) - expected) < 1e-9

    def test_recon(self):
        assert loss_recon([1.0, 2.0, 3.0], [1.0, 2.0, 5.0]) == pytest.approx(2 / 3)

    def test_shape_mismatch(self):
        with pytest.raises(DomainError):
            loss_wpts(np.zeros((5, 4)), np.zeros((4, 4)))

    def test_empty(self):
        with pytest.raises(DomainError):
            loss_recon([], [])


class FlagParams(NamedTuple):
    p: float
    y: int
    expected: float


flag_test_cases = [
    pytest.param(FlagParams(p=0.5, y=1, expected=math.log(2)), id="coin flip positive"),
    pytest.param(FlagParams(p=0.5, y=0, expected=math.log(2)), id="coin flip negative"),
    pytest.param(FlagParams(p=0.9, y=1, expected=0.10536051565782628), id="confident"),
    pytest.param(FlagParams(p=1.0, y=1, expected=0.0), id="certain and right"),
    pytest.param(FlagParams(p=0.0, y=0, expected=0.0), id="certain negative"),
]


class TestFlagLoss:
    @pytest.mark.parametrize("parameters", flag_test_cases)
    def test_values(self, parameters: FlagParams):
        value = loss_flag(parameters.p, parameters.y)
        assert value == pytest.approx(parameters.expected, abs=1e-6)

    def test_wrong_and_certain_is_finite(self):
        assert math.isfinite(loss_flag(0.0, 1))
        assert loss_flag(0.0, 1) == pytest.approx(-math.log(1e-7))

    def test_convex(self, rng):
        for y in (0, 1):
            for p1, p2 in rng.uniform(0.01, 0.99, size=(100, 2)):
                mid = loss_flag((p1 + p2) / 2, y)
                assert mid <= (loss_flag(p1, y) + loss_flag(p2, y)) / 2 + 1e-12

    def test_bad_label(self):
        with pytest.raises(DomainError):
            loss_flag(0.5, 2)


class TestBoxes:
    def test_identical(self):
        box = BBox(cx=0.4, cy=0.6, w=0.2, h=0.3)
        assert iou(box, box) == pytest.approx(1.0)
        assert loss_bbox(box, box) == pytest.approx(0.0, abs=1e-12)

    def test_disjoint(self):
        a = BBox(cx=0.2, cy=0.2, w=0.1, h=0.1)
        b = BBox(cx=0.8, cy=0.8, w=0.1, h=0.1)
        assert iou(a, b) == 0.0

    def test_nested(self):
        pred = BBox(cx=0.5, cy=0.5, w=0.5, h=0.5)
        gt = BBox(cx=0.5, cy=0.5, w=0.25, h=0.25)
        assert iou(pred, gt) == pytest.approx(0.25)
        assert loss_bbox(pred, gt) == pytest.approx(0.125 + 0.75)

    def test_symmetric(self, rng):
        for _ in range(100):
            a = BBox(**dict(zip(("cx", "cy", "w", "h"), rng.uniform(0.05, 0.95, 4))))
            b = BBox(**dict(zip(("cx", "cy", "w", "h"), rng.uniform(0.05, 0.95, 4))))
            assert iou(a, b) == pytest.approx(iou(b, a))
            assert 0.0 <= iou(a, b) <= 1.0

    def test_clamped_into_the_image(self):
        box = BBox(cx=0.95, cy=0.5, w=0.2, h=0.2)
        assert box.corners[2] == pytest.approx(1.0)
        assert box.cx == pytest.approx(0.925)
        assert box.w == pytest.approx(0.15)

    @pytest.mark.parametrize(
        "fields",
        [
            pytest.param(dict(cx=1.2, cy=0.5, w=0.1, h=0.1), id="center outside"),
            pytest.param(dict(cx=0.5, cy=0.5, w=0.0, h=0.1), id="empty width"),
        ],
    )
    def test_invalid(self, fields):
        with pytest.raises(ValidationError):
            BBox(**fields)


class TestTotalLoss:
    def test_stage_two_sum(self):
        parts = {"wpts": 0.2, "recon": 0.3, "flag": 0.5}
        assert total_loss(2, parts) == pytest.approx(1.0)

    def test_stage_one(self):
        assert total_loss(1, {"bbox": 0.0}) == 0.0

    def test_stage_two_ignores_the_box(self):
        parts = {"wpts": 0.2, "recon": 0.3, "flag": 0.5, "bbox": 7.0}
        assert total_loss(2, parts) == pytest.approx(1.0)

    def test_weights(self):
        parts = {"wpts": 0.2, "recon": 0.3, "flag": 0.5}
        assert total_loss(2, parts, {"flag": 2.0}) == pytest.approx(1.5)

    def test_missing_part(self):
        with pytest.raises(DomainError):
            total_loss(2, {"wpts": 1.0})

    def test_unknown_stage(self):
        with pytest.raises(DomainError):
            total_loss(3, {"bbox": 1.0})


class TestSwapNegatives:
    def test_two_samples_swap(self):
        out = swap_negatives(samples(2), seed=5)
        negatives = [(s.instruction_id, s.observation_id) for s in out if not s.label]
        assert negatives == [("i1", "o0"), ("i0", "o1")]

    @pytest.mark.parametrize("seed", [0, 1, 42, 2**40])
    def test_no_fixed_points(self, seed):
        out = swap_negatives(samples(9), seed)
        negatives = [s for s in out if s.label == 0]
        assert all(s.instruction_id[1:] != s.observation_id[1:] for s in negatives)
        instructions = sorted(s.instruction_id for s in negatives)
        assert instructions == [f"i{k}" for k in range(9)]

    def test_balance(self):
        out = swap_negatives(samples(6), seed=3)
        assert len(out) == 12
        assert sum(s.label for s in out) == 6

    def test_deterministic(self):
        assert swap_negatives(samples(7), 11) == swap_negatives(samples(7), 11)

    def test_too_few(self):
        with pytest.raises(DomainError):
            swap_negatives(samples(1), 0)

    def test_derangement_has_no_fixed_points(self, rng):
        for n in range(2, 30):
            perm = derangement(n, rng)
            assert sorted(perm) == list(range(n))
            assert all(i != p for i, p in enumerate(perm))

    def test_label_is_binary(self):
        with pytest.raises(ValidationError):
            AlignmentSample(instruction_id="a", observation_id="b", label=2)
