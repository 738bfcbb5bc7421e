from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mprkit import DataError
from mprkit.labels import Lesion
from mprkit.phantom import Centerline, PhantomSpec, generate_phantom, uniform_chord_points
from mprkit.reformat import (
    MprStack, build_frames, cylinder_mask, cylinder_mask_array, extract_mpr, load_stack, rotate_frames,
    rotate_view, save_stack,
)
from mprkit.volume import Volume3D, sample_points, sample_trilinear

TUBE = PhantomSpec(noise_sigma_hu=0.0, axis=(0.0, 0.0, 1.0), diameter_reduction=0.0, chord_mm=40.0)


def _bezier(p0, p1, p2, step=0.5):
    return Centerline(uniform_chord_points(np.asarray(p0, float), np.asarray(p1, float),
                                           np.asarray(p2, float), step), step)


def _angle(a, b):
    return np.arccos(np.clip(np.sum(a * b, axis=1), -1.0, 1.0))


def test_straight_line_frames_are_constant():
    cl = _bezier([0, 0, 0], [0, 0, 10], [0, 0, 20])
    fr = build_frames(cl)
    assert np.allclose(fr.tangent, [0, 0, 1], atol=1e-12)
    assert np.allclose(fr.normal, fr.normal[0], atol=1e-12)
    assert np.allclose(fr.binormal, fr.binormal[0], atol=1e-12)
    assert np.allclose(fr.normal[0], [1, 0, 0])


def test_straight_diagonal_has_no_twist():
    d = np.array([1.0, 2.0, -0.5]) / np.linalg.norm([1.0, 2.0, -0.5])
    pts = np.arange(60)[:, None] * 0.5 * d
    fr = build_frames(pts)
    assert np.max(_angle(fr.normal[1:], fr.normal[:-1])) < 1e-7
    assert np.max(np.abs(fr.normal - fr.normal[0])) < 1e-12


def test_planar_arc_keeps_plane_normal_fixed():
    # xz-plane arc: the seed axis is y, the plane normal, so it is transported unchanged
    p0, p1, p2 = np.array([0, 0, 0.0]), np.array([0, 0, 10.0]), np.array([8, 0, 16.0])
    fr = build_frames(_bezier(p0, p1, p2))
    assert np.max(np.abs(fr.normal - [0, 1, 0])) < 1e-6
    assert np.max(np.abs(fr.binormal @ [0, 1, 0])) < 1e-6


def test_tilted_planar_arc_has_constant_plane_components():
    p0, p1, p2 = np.array([0, 0, 0.0]), np.array([5, 8, 1.0]), np.array([12, 2, 3.0])
    fr = build_frames(_bezier(p0, p1, p2))
    plane_n = np.cross(p1 - p0, p2 - p0)
    plane_n /= np.linalg.norm(plane_n)
    assert np.max(np.abs(fr.tangent @ plane_n)) < 1e-9
    for v in (fr.normal, fr.binormal):
        d = v @ plane_n
        assert np.max(np.abs(d - d[0])) < 1e-6


@settings(max_examples=40, deadline=None)
@given(ctrl=st.lists(st.floats(-10, 10), min_size=9, max_size=9))
def test_frame_invariants_on_random_curves(ctrl):
    p0, p1, p2 = np.reshape(ctrl, (3, 3))
    if np.linalg.norm(p2 - p0) < 3.0:
        return
    cl = _bezier(p0, p1, p2)
    if len(cl) < 3:
        return
    fr = build_frames(cl)
    t, n, b = fr.tangent, fr.normal, fr.binormal
    for u, v in ((t, n), (t, b), (n, b)):
        assert np.max(np.abs(np.sum(u * v, axis=1))) < 1e-9
    for u in (t, n, b):
        assert np.max(np.abs(np.linalg.norm(u, axis=1) - 1)) < 1e-9
    fd = np.gradient(cl.points, axis=0)
    assert np.all(np.sum(t * fd, axis=1) > 0)
    assert np.all(_angle(n[1:], n[:-1]) <= _angle(t[1:], t[:-1]) + 1e-6)


def test_degenerate_centerline():
    with pytest.raises(DataError, match="degenerate centerline"):
        build_frames(np.array([[0, 0, 0], [0, 0, 0.5], [0, 0, 0.5]], float))


@pytest.fixture(scope="module")
def tube():
    vol, cl, rec = generate_phantom(TUBE, 0)
    return vol, cl, build_frames(cl)


def test_healthy_cross_section_is_analytic_disk(tube):
    vol, cl, fr = tube
    mid = len(cl) // 2
    st_ = extract_mpr(vol, cl, fr, Lesion("x", mid - 2, mid + 2, 0.0))
    h = st_.pixels.shape[1]
    c = (h - 1) / 2
    r_px = np.hypot(*np.meshgrid(np.arange(h) - c, np.arange(h) - c, indexing="ij"))
    r0_px = TUBE.healthy_radius_mm / st_.in_plane_spacing_mm
    disk = np.where(r_px < r0_px, TUBE.lumen_hu, TUBE.background_hu)
    ring = np.abs(r_px - r0_px) <= 1.0
    for sl in st_.pixels:
        assert np.max(np.abs(sl - disk)[~ring]) < 1e-3
        assert np.all((sl >= 0) & (sl <= TUBE.lumen_hu + 1e-6))


def test_stack_length_follows_lesion(tube):
    vol, cl, fr = tube
    st_ = extract_mpr(vol, cl, fr, Lesion("x", 10, 73, 0.0))
    assert st_.dims == (64, 32, 32)
    assert st_.meta["lesion_id"] == "x"


@pytest.mark.parametrize("bad", [(-1, 5), (5, 5), (10, 10_000)])
def test_lesion_out_of_range(tube, bad):
    vol, cl, fr = tube
    with pytest.raises(DataError, match="lesion out of range"):
        extract_mpr(vol, cl, fr, Lesion("x", *bad, 0.0))


def test_center_pixel_is_centerline_sample():
    spec = PhantomSpec(dims=(64, 64, 64), chord_mm=20.0, curvature=0.5, diameter_reduction=0.4)
    vol, cl, _ = generate_phantom(spec, 3)
    fr = build_frames(cl)
    st_ = extract_mpr(vol, cl, fr, Lesion("x", 3, len(cl) - 4, 0.0), h=31)
    for ell, sl in enumerate(st_.pixels):
        assert sl[15, 15] == sample_trilinear(vol, cl.points[3 + ell])


def test_axis_aligned_equivalence():
    rng = np.random.default_rng(4)
    vol = Volume3D((40, 40, 40), (0.5, 0.5, 0.5), (0, 0, 0), rng.normal(0, 100, 40**3))
    z = np.arange(10, 30) * 0.37
    pts = np.c_[np.full_like(z, 9.8), np.full_like(z, 10.1), z]
    fr = build_frames(pts)
    st_ = extract_mpr(vol, pts, fr, Lesion("x", 0, len(z) - 1, 0.0), h=16, in_plane_spacing_mm=0.45)
    off = (np.arange(16) - 7.5) * 0.45
    X, Y = np.meshgrid(9.8 + off, 10.1 + off, indexing="ij")
    for ell, zz in enumerate(z):
        ref = sample_points(vol, np.stack([X, Y, np.full_like(X, zz)], axis=-1))
        assert np.max(np.abs(st_.pixels[ell] - ref)) < 1e-9


def _const_stack(h=32, L=3, value=1.0):
    return MprStack(np.full((L, h, h), value), 0.5, 0.5)


def test_cylinder_mask_examples():
    m = cylinder_mask(_const_stack()).pixels
    for sl in m:
        assert sl[0, 0] == sl[0, -1] == sl[-1, 0] == sl[-1, -1] == 0.0
        assert sl[16, 16] == 1.0
        assert abs(sl.mean() - np.pi / 4) <= 0.02
    assert np.array_equal(cylinder_mask(cylinder_mask(_const_stack())).pixels, m)


def test_cylinder_mask_only_zeroes_outside():
    rng = np.random.default_rng(0)
    s = MprStack(rng.normal(size=(2, 32, 32)), 0.5, 0.5)
    keep = cylinder_mask_array(32, 32)
    out = cylinder_mask(s).pixels
    assert np.array_equal(out[:, keep], s.pixels[:, keep])
    assert np.all(out[:, ~keep] == 0)


def test_view_zero_is_bit_identical():
    rng = np.random.default_rng(0)
    s = cylinder_mask(MprStack(rng.normal(size=(2, 32, 32)), 0.5, 0.5))
    v = rotate_view(s, 0)
    assert np.array_equal(v.pixels, s.pixels) and v.pixels is not s.pixels
    assert v.meta["view_k"] == 0


def test_radially_symmetric_slice_is_rotation_invariant():
    sigma = 8.0
    c = 15.5
    i, j = np.meshgrid(np.arange(32) - c, np.arange(32) - c, indexing="ij")
    blob = np.exp(-(i**2 + j**2) / (2 * sigma**2))
    s = cylinder_mask(MprStack(blob[None], 0.5, 0.5))
    rng_ = s.pixels.max() - s.pixels.min()
    inner = np.hypot(i, j) <= 13
    bound = (1 / sigma**2) * 2 / 8  # bilinear error: h^2/8 (|f_xx| + |f_yy|)
    for k in range(18):
        d = np.abs(rotate_view(s, k).pixels[0] - s.pixels[0])
        assert d[inner].mean() <= 1e-3 * rng_
        assert d[inner].max() <= bound * rng_


def test_half_turn_twice_restores_masked_stack():
    rng = np.random.default_rng(1)
    s = cylinder_mask(MprStack(rng.uniform(0, 400, (3, 32, 32)), 0.5, 0.5))
    back = rotate_view(rotate_view(s, 9), 9).pixels
    assert np.max(np.abs(back - s.pixels)) < 0.02 * 400


@pytest.mark.parametrize("k", [-1, 18, 2.0])
def test_invalid_view_index(k):
    with pytest.raises(DataError, match="invalid view index"):
        rotate_view(_const_stack(), k)


def test_rotation_matches_resampling_with_rotated_frames():
    spec = PhantomSpec(noise_sigma_hu=0.0, curvature=0.4, diameter_reduction=0.5)
    vol, cl, rec = generate_phantom(spec, 7)
    fr = build_frames(cl)
    les = Lesion("x", rec.start_idx, rec.end_idx, rec.stenosis_grade)
    base = cylinder_mask(extract_mpr(vol, cl, fr, les))
    inside = cylinder_mask_array(32, 32)
    dyn = spec.lumen_hu - spec.background_hu
    for k in range(1, 18):
        a = rotate_view(base, k).pixels
        b = cylinder_mask(extract_mpr(vol, cl, rotate_frames(fr, 2 * np.pi * k / 18), les)).pixels
        assert np.abs(a - b)[:, inside].mean() < 0.01 * dyn


def test_stack_file_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    s = MprStack(rng.normal(size=(4, 8, 8)).astype(np.float32), 0.5, 0.25, {"lesion_id": "l1", "view_k": 3})
    save_stack(s, tmp_path / "s.json")
    back = load_stack(tmp_path / "s.json")
    assert np.array_equal(back.pixels, s.pixels)
    assert back.meta == {"lesion_id": "l1", "view_k": 3}
    assert (back.in_plane_spacing_mm, back.step_mm) == (0.5, 0.25)


def test_rotate_frames_keeps_orthonormality(tube):
    _, _, fr = tube
    r = rotate_frames(fr, 1.234)
    assert np.max(np.abs(np.sum(r.normal * r.binormal, axis=1))) < 1e-12
    assert np.max(np.abs(np.sum(r.normal * r.tangent, axis=1))) < 1e-12
    assert np.allclose(replace(r).tangent, fr.tangent)
