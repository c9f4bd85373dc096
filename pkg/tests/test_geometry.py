import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from difftrack.errors import (DegenerateInputError, InputError, UnitError)
from difftrack.geometry import (BoundingBox, BoxFormat, BoxUnit, CropMapping,
                                box_iou_giou, crop_region, giou, iou,
                                localization_loss, localization_loss_terms,
                                map_box_to_crop, map_box_to_frame)
from oracles import finite_difference_gradient, max_rel_error, raster_iou_giou


def xywh(x, y, w, h, unit=BoxUnit.PIXEL):
    return BoundingBox(x, y, w, h, format=BoxFormat.XYWH_TOPLEFT, unit=unit)


# ---------------------------------------------------------------------------
# Frozen values.


def test_iou_identical_boxes():
    assert iou(xywh(0, 0, 4, 4), xywh(0, 0, 4, 4)) == 1.0


def test_iou_disjoint():
    assert iou(xywh(0, 0, 1, 1), xywh(2, 0, 1, 1)) == 0.0


def test_iou_contained_quarter():
    # 2x2 box inside a 4x4 box: intersection 4, union 16
    assert iou(xywh(0, 0, 4, 4), xywh(1, 1, 2, 2)) == pytest.approx(0.25, abs=1e-12)


def test_giou_identical():
    assert giou(xywh(0, 0, 4, 4), xywh(0, 0, 4, 4)) == pytest.approx(1.0, abs=1e-12)


def test_giou_disjoint_third():
    # hull 3x1, union 2 -> 0 - 1/3
    val = giou(xywh(0, 0, 1, 1), xywh(2, 0, 1, 1))
    assert val == pytest.approx(-1.0 / 3.0, abs=1e-12)


def test_giou_contained_equals_iou():
    # hull equals the outer box, so the penalty vanishes
    assert giou(xywh(0, 0, 4, 4), xywh(1, 1, 2, 2)) == pytest.approx(0.25, abs=1e-12)


def test_localization_loss_zero_at_gt():
    b = BoundingBox(0.5, 0.5, 0.2, 0.3, format=BoxFormat.CXCYWH, unit=BoxUnit.NORMALIZED)
    assert localization_loss(b, b) == pytest.approx(0.0, abs=1e-9)


def test_localization_loss_concentric_squares():
    # mean|delta| = 0.1 over 4 coords; concentric squares have giou = iou = 0.25
    pred = BoundingBox(0.5, 0.5, 0.2, 0.2, format=BoxFormat.CXCYWH, unit=BoxUnit.NORMALIZED)
    gt = BoundingBox(0.5, 0.5, 0.4, 0.4, format=BoxFormat.CXCYWH, unit=BoxUnit.NORMALIZED)
    assert localization_loss(pred, gt) == pytest.approx(5 * 0.1 + 2 * 0.75, abs=1e-6)


def test_localization_loss_rejects_pixel_units():
    a = xywh(0, 0, 4, 4)
    with pytest.raises(UnitError):
        localization_loss(a, a)


def test_iou_rejects_mixed_units():
    with pytest.raises(UnitError):
        iou(xywh(0, 0, 1, 1), xywh(0, 0, 1, 1, unit=BoxUnit.NORMALIZED))


def test_giou_both_zero_area_is_degenerate():
    with pytest.raises(DegenerateInputError):
        giou(xywh(1, 1, 0, 0), xywh(3, 3, 0, 0))


# ---------------------------------------------------------------------------
# Oracle comparison: raster counting on lattice-aligned boxes is exact.


def test_overlap_matches_raster_oracle_200_pairs():
    rng = np.random.default_rng(7)

    def lattice_box():
        x1, y1 = rng.integers(0, 200, size=2) * 0.25
        w, h = (rng.integers(1, 120, size=2)) * 0.25
        return (x1, y1, x1 + w, y1 + h)

    for _ in range(200):
        a, b = lattice_box(), lattice_box()
        want_iou, want_giou = raster_iou_giou(a, b)
        box_a = BoundingBox(*a, format=BoxFormat.XYXY, unit=BoxUnit.PIXEL)
        box_b = BoundingBox(*b, format=BoxFormat.XYXY, unit=BoxUnit.PIXEL)
        assert iou(box_a, box_b) == pytest.approx(want_iou, abs=1e-3)
        assert giou(box_a, box_b) == pytest.approx(want_giou, abs=1e-3)


# ---------------------------------------------------------------------------
# Properties.


def _random_xyxy(rng, n):
    x1 = rng.uniform(0, 50, n)
    y1 = rng.uniform(0, 50, n)
    w = rng.uniform(0.1, 40, n)
    h = rng.uniform(0.1, 40, n)
    return torch.tensor(np.stack([x1, y1, x1 + w, y1 + h], axis=-1))


def test_bounds_and_ordering_on_10k_random_pairs():
    rng = np.random.default_rng(3)
    a = _random_xyxy(rng, 10_000)
    b = _random_xyxy(rng, 10_000)
    i, g = box_iou_giou(a, b)
    assert torch.all((i >= 0) & (i <= 1))
    assert torch.all((g > -1) & (g <= 1))
    assert torch.all(g <= i + 1e-9)


def test_iou_symmetry():
    rng = np.random.default_rng(4)
    a = _random_xyxy(rng, 500)
    b = _random_xyxy(rng, 500)
    i_ab, g_ab = box_iou_giou(a, b)
    i_ba, g_ba = box_iou_giou(b, a)
    assert torch.allclose(i_ab, i_ba)
    assert torch.allclose(g_ab, g_ba)


def test_giou_monotone_toward_minus_one_with_separation():
    a = xywh(0, 0, 2, 2)
    vals = [giou(a, xywh(3 + 10 * k, 0, 2, 2)) for k in range(30)]
    assert all(v2 < v1 for v1, v2 in zip(vals, vals[1:]))
    assert vals[-1] < -0.95  # approaches -1 in the separation limit


@given(x=st.floats(0, 100), y=st.floats(0, 100),
       w=st.floats(0.01, 50), h=st.floats(0.01, 50))
@settings(max_examples=200, deadline=None)
def test_format_round_trips_exact(x, y, w, h):
    box = xywh(x, y, w, h)
    for fmt in (BoxFormat.CXCYWH, BoxFormat.XYXY, BoxFormat.XYWH_TOPLEFT):
        back = box.to(fmt).to(BoxFormat.XYWH_TOPLEFT)
        for got, want in zip(back.as_xywh(), box.as_xywh()):
            assert got == pytest.approx(want, abs=1e-9)


@given(x=st.floats(0, 0.8), y=st.floats(0, 0.8),
       w=st.floats(0.01, 0.2), h=st.floats(0.01, 0.2))
@settings(max_examples=100, deadline=None)
def test_unit_round_trip(x, y, w, h):
    box = xywh(x * 640, y * 480, w * 640, h * 480)
    back = box.normalized(640, 480).to_pixels(640, 480)
    for got, want in zip(back.as_xywh(), box.as_xywh()):
        assert got == pytest.approx(want, abs=1e-6)


# ---------------------------------------------------------------------------
# Gradients against central finite differences.


def _loss_from_flat(flat: torch.Tensor) -> torch.Tensor:
    pred = flat.reshape(-1, 4)
    gt = torch.tensor([[0.5, 0.5, 0.3, 0.4]], dtype=torch.float64).expand_as(pred)
    l1, g = localization_loss_terms(pred, gt)
    return (5.0 * l1 + 2.0 * g).sum()


def test_localization_gradient_matches_finite_differences():
    rng = np.random.default_rng(11)
    for _ in range(50):
        # non-degenerate random CXCYWH prediction
        p = np.concatenate([rng.uniform(0.2, 0.8, 2), rng.uniform(0.1, 0.5, 2)])
        x = torch.tensor(p, dtype=torch.float64, requires_grad=True)
        _loss_from_flat(x).backward()
        analytic = x.grad.detach().clone()
        numeric = finite_difference_gradient(
            lambda v: _loss_from_flat(v).detach(), x.detach().clone())
        assert max_rel_error(analytic, numeric) < 1e-4


# ---------------------------------------------------------------------------
# Crops and mappings.


def test_crop_uniform_image_stays_uniform():
    frame = np.full((100, 120, 3), 37, dtype=np.uint8)
    crop, m = crop_region(frame, xywh(40, 30, 20, 20), 2.0, 64)
    assert crop.shape == (64, 64, 3)
    assert np.all(crop == 37)
    assert m.source_center == (50.0, 40.0)


def test_crop_mapping_round_trip_100_boxes():
    rng = np.random.default_rng(5)
    frame = np.zeros((240, 320, 3), dtype=np.uint8)
    anchor = xywh(100, 80, 60, 40)
    _, m = crop_region(frame, anchor, 4.0, 128)
    for _ in range(100):
        x, y = rng.uniform(10, 200), rng.uniform(10, 150)
        w, h = rng.uniform(1, 40), rng.uniform(1, 40)
        box = xywh(x, y, w, h)
        back = map_box_to_frame(map_box_to_crop(box, m), m, clip=False)
        for got, want in zip(back.as_xywh(), box.as_xywh()):
            assert got == pytest.approx(want, abs=1e-6)


def test_map_scale_two_doubles_extents():
    m = CropMapping(source_center=(0.0, 0.0), scale=2.0, crop_size=64,
                    frame_w=0, frame_h=0)
    out = map_box_to_frame(xywh(10, 10, 5, 7), m, clip=False)
    assert out.width == pytest.approx(10.0)
    assert out.height == pytest.approx(14.0)


def test_crop_factor_must_be_positive():
    frame = np.zeros((50, 50, 3), dtype=np.uint8)
    with pytest.raises(InputError):
        crop_region(frame, xywh(10, 10, 5, 5), 0.0, 32)


def test_crop_zero_area_anchor_degenerate():
    frame = np.zeros((50, 50, 3), dtype=np.uint8)
    with pytest.raises(DegenerateInputError):
        crop_region(frame, xywh(10, 10, 0, 5), 2.0, 32)


def test_crop_requires_pixel_units():
    frame = np.zeros((50, 50, 3), dtype=np.uint8)
    with pytest.raises(UnitError):
        crop_region(frame, xywh(0.1, 0.1, 0.2, 0.2, unit=BoxUnit.NORMALIZED), 2.0, 32)


def test_crop_side_is_area_factor_times_sqrt_area():
    # a 2:1 box and factor 3 -> side 3*sqrt(200); check via mapping scale
    frame = np.zeros((400, 400, 3), dtype=np.uint8)
    _, m = crop_region(frame, xywh(100, 100, 20, 10), 3.0, 64)
    assert m.scale * 64 == pytest.approx(3.0 * math.sqrt(200.0), rel=1e-9)


def test_out_of_frame_padding_uses_mean_color():
    frame = np.full((60, 60, 3), 200, dtype=np.uint8)
    crop, _ = crop_region(frame, xywh(0, 0, 20, 20), 4.0, 64)  # spills out
    # corners fall outside the frame and must take the mean color
    assert abs(int(crop[0, 0, 0]) - 200) <= 1


def test_clipped_normalized_box_in_unit_range():
    box = BoundingBox(-0.2, 0.5, 0.8, 1.4, format=BoxFormat.XYXY,
                      unit=BoxUnit.NORMALIZED)
    c = box.clipped(1.0, 1.0)
    x1, y1, x2, y2 = c.as_xyxy()
    assert 0.0 <= x1 <= x2 <= 1.0
    assert 0.0 <= y1 <= y2 <= 1.0
