import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ivs.render import (
    BLOCK,
    BOARD,
    PALETTE,
    PEG,
    PEG_RIM,
    TIP,
    Camera,
    Image,
    decode_ppm,
    encode_ppm,
    perceive_poses,
    read_ppm,
    render_rgb,
    write_ppm,
)
from ivs.datapipe import BACKGROUND, is_red
from ivs.workspace import BOARD_RECT, Block, ContractViolation, Pose2, TaskState, init_board, make_pegs


def _colors(img):
    return {tuple(c) for c in np.unique(img.pixels.reshape(-1, 3), axis=0)}


def test_empty_board_colors():
    img = render_rgb(TaskState(make_pegs(), [], tip_true=Pose2(500, 500)))
    assert img.width == 1900 and img.height == 1200
    assert _colors(img) <= {BOARD, PEG, PEG_RIM}


def test_full_scene_palette_and_determinism():
    s = init_board(3)
    s.tip_true = Pose2(10.0, 10.0)
    a, b = render_rgb(s), render_rgb(s)
    assert a == b
    assert _colors(a) <= set(PALETTE)
    assert {BOARD, BLOCK, PEG, TIP} <= _colors(a)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 1000), st.integers(0, 1750), st.integers(0, 1050))
def test_region_equals_crop(seed, c0, r0):
    s = init_board(seed)
    s.tip_true = Pose2(*np.random.default_rng(seed).uniform((0, 0), (100, 50)))
    full = render_rgb(s)
    rect = (c0, r0, 150, 150)
    assert render_rgb(s, region=rect) == full.crop(rect)


def test_region_crops_around_pegs_and_tip():
    s = init_board(11)
    s.tip_true = s.blocks[2].opening_center + (3.0, -2.0)
    full = render_rgb(s)
    cam = Camera()
    for p in s.pegs:
        rect = cam.crop_rect(p.center)
        assert render_rgb(s, cam, rect) == full.crop(rect)


def test_board_inside_frame():
    cam = Camera()
    x0, y0, x1, y1 = BOARD_RECT
    for corner in [(x0, y0), (x1, y1), (x0, y1), (x1, y0)]:
        u, v = cam.to_px(corner)
        assert 0 <= u < cam.frame_w and 0 <= v < cam.frame_h


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 1899), st.integers(0, 1199))
def test_pixel_mm_roundtrip(u, v):
    cam = Camera()
    x, y = cam.to_mm(u, v)
    uu, vv = cam.to_px((float(x), float(y)))
    assert abs(uu - u) < 0.5 and abs(vv - v) < 0.5
    assert cam.pixel_of((float(x), float(y))) == (u, v)


def test_red_classifier():
    for c in (BOARD, BLOCK, PEG, PEG_RIM):
        assert is_red(np.array([[c]], dtype=np.uint8))[0, 0]
    for c in (TIP, BACKGROUND):
        assert not is_red(np.array([[c]], dtype=np.uint8))[0, 0]


def test_tip_drawn_with_jaw_tick():
    s = TaskState(make_pegs(), [], tip_true=Pose2(50.0, 25.0))
    cam = Camera()
    u, v = cam.pixel_of(s.tip_true)
    img = render_rgb(s, cam)
    assert tuple(img.pixels[v, u]) == TIP
    # jaw tick points toward -y, i.e. down the image
    open_len = sum(tuple(img.pixels[v + d, u]) == TIP for d in range(0, 30))
    s.jaw = "closed"
    closed_len = sum(tuple(render_rgb(s, cam).pixels[v + d, u]) == TIP for d in range(0, 30))
    assert open_len > closed_len > 8


def test_block_hole_shows_board():
    b = Block(0, Pose2(37.0, 12.0), 0.4, "on_peg", None)
    s = TaskState(make_pegs(), [b], tip_true=Pose2(500, 500))
    cam = Camera()
    u, v = cam.pixel_of(b.opening_center)
    img = render_rgb(s, cam)
    assert tuple(img.pixels[v, u]) == BOARD
    g = cam.pixel_of(b.opening_center + (6.0 * math.cos(0.4), 6.0 * math.sin(0.4)))
    assert tuple(img.pixels[g[1], g[0]]) == BLOCK


def test_perceive_poses_noise_and_clock():
    s = init_board(0)
    a = perceive_poses(s.copy(), 5)
    b = perceive_poses(s.copy(), 5)
    assert a.blocks.keys() == b.blocks.keys()
    for k in a.blocks:
        assert a.blocks[k][0] == b.blocks[k][0]
    t0 = s.clock
    perceive_poses(s, 1)
    assert s.clock - t0 == pytest.approx(0.625)
    with pytest.raises(ContractViolation):
        perceive_poses(s, 1, tip_moving=True)


def test_perceive_poses_sd():
    s = init_board(0)
    errs, peg_errs = [], []
    for seed in range(1000):
        sc = perceive_poses(s, seed)
        for b in s.blocks:
            errs.append(np.subtract(sc.blocks[b.id][0], b.opening_center))
        for p in s.pegs:
            peg_errs.append(np.subtract(sc.pegs[p.id], p.center))
    assert np.std(np.asarray(errs)) == pytest.approx(1.0, rel=0.1)
    assert np.std(np.asarray(peg_errs)) == pytest.approx(0.3, rel=0.1)


def test_ppm_roundtrip_and_errors(tmp_path):
    rng = np.random.default_rng(0)
    img = Image(rng.integers(0, 256, (7, 5, 3), dtype=np.uint8), (3, 4))
    data = encode_ppm(img)
    assert data.startswith(b"P6\n5 7\n255\n")
    assert decode_ppm(data, (3, 4)) == img
    p = tmp_path / "x.ppm"
    write_ppm(p, img)
    assert read_ppm(p, (3, 4)) == img
    p.write_bytes(data[:-4])
    with pytest.raises(ValueError, match="x.ppm"):
        read_ppm(p)
    with pytest.raises(ValueError, match="missing.ppm"):
        read_ppm(tmp_path / "missing.ppm")
    with pytest.raises(ValueError):
        decode_ppm(b"P3\n1 1\n255\n\x00\x00\x00")


def test_crop_out_of_bounds():
    img = Image(np.zeros((10, 10, 3), np.uint8))
    with pytest.raises(ValueError):
        img.crop((5, 5, 10, 10))
    with pytest.raises(ValueError):
        render_rgb(init_board(0), region=(1850, 0, 100, 100))
