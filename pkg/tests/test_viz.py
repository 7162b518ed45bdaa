import io

import numpy as np
import pytest
from PIL import Image as PILImage

from deform_attrib.viz import (
    NEUTRAL, QuiverStyle, default_stride, difference_rgb, parse_quiver, render_difference,
    render_quiver, side_by_side, swap_hues,
)


def is_pink(px):
    r, g, b = (int(v) for v in px)
    return r > g and b > g


def is_green(px):
    r, g, b = (int(v) for v in px)
    return g > r and g > b


def test_zero_field_gives_zero_length_arrows(rng):
    svg = render_quiver(rng.uniform(size=(16, 16)), np.zeros((2, 16, 16)), QuiverStyle(scale=2, stride=4))
    arrows = parse_quiver(svg)
    assert len(arrows) == 16
    assert all(a["start"] == a["end"] for a in arrows)


def test_constant_field_scale_two(rng):
    field = np.zeros((2, 12, 12))
    field[0] = 1.0
    arrows = parse_quiver(render_quiver(rng.uniform(size=(12, 12)), field, QuiverStyle(scale=2, stride=3)))
    vecs = {(a["end"][0] - a["start"][0], a["end"][1] - a["start"][1]) for a in arrows}
    assert vecs == {(2.0, 0.0)}
    assert len({a["stroke"] for a in arrows}) == 1


@pytest.mark.parametrize("scale", [2.0, 5.0])
def test_arrow_endpoints_are_exact(rng, scale):
    field = rng.normal(0, 1.5, size=(2, 20, 18))
    arrows = parse_quiver(render_quiver(rng.uniform(size=(20, 18)), field, QuiverStyle(scale=scale, stride=1)))
    assert len(arrows) == 20 * 18
    for a in arrows:
        r, c = a["p"]
        assert a["start"] == (r, c)
        assert a["end"] == (r + scale * field[0, r, c], c + scale * field[1, r, c])


def test_arrow_colour_tracks_length():
    field = np.zeros((2, 4, 4))
    field[1, 0, 0] = 3.0
    arrows = {a["p"]: a for a in parse_quiver(render_quiver(np.zeros((4, 4)), field, QuiverStyle(stride=1)))}
    assert arrows[(0, 0)]["stroke"] != arrows[(1, 1)]["stroke"]


def test_three_dimensional_quiver_needs_slice(rng):
    vol, field = rng.uniform(size=(4, 8, 8)), rng.normal(size=(3, 4, 8, 8))
    with pytest.raises(ValueError):
        render_quiver(vol, field)
    arrows = parse_quiver(render_quiver(vol, field, QuiverStyle(stride=1), slice_index=2))
    a = next(x for x in arrows if x["p"] == (3, 5))
    assert a["phi"] == (field[1, 2, 3, 5], field[2, 2, 3, 5])


def test_style_and_stride_defaults():
    with pytest.raises(ValueError):
        QuiverStyle(scale=0)
    with pytest.raises(ValueError):
        QuiverStyle(stride=0)
    assert default_stride((64, 64)) == 2
    assert default_stride((20, 20)) == 1


def test_all_zero_map_is_neutral_gray():
    rgb = difference_rgb(np.zeros((5, 7)))
    assert np.all(rgb == NEUTRAL)


def test_positive_map_is_uniform_pink():
    rgb = difference_rgb(np.full((4, 4), 0.3))
    assert np.all(rgb == rgb[0, 0])
    assert is_pink(rgb[0, 0])
    assert is_green(difference_rgb(np.full((4, 4), -0.3))[0, 0])


def test_sign_flip_swaps_hues(rng):
    m = rng.normal(size=(16, 16))
    pos, neg = difference_rgb(m), difference_rgb(-m)
    assert np.array_equal(neg, swap_hues(pos))
    for idx in zip(*np.nonzero(np.abs(m) > 0.5)):
        assert is_pink(pos[idx]) == (m[idx] > 0)
        assert is_green(pos[idx]) == (m[idx] < 0)
        assert is_pink(neg[idx]) == is_green(pos[idx])


def test_non_finite_map_rejected():
    with pytest.raises(ValueError):
        difference_rgb(np.array([[0.0, np.nan]]))


def test_rendering_is_byte_identical(rng, tmp_path):
    img, field, diff = rng.uniform(size=(8, 8)), rng.normal(size=(2, 8, 8)), rng.normal(size=(8, 8))
    assert render_quiver(img, field) == render_quiver(img.copy(), field.copy())
    render_difference(diff, tmp_path / "a.png")
    render_difference(diff.copy(), tmp_path / "b.png")
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
    decoded = np.asarray(PILImage.open(io.BytesIO((tmp_path / "a.png").read_bytes())))
    assert np.array_equal(decoded, difference_rgb(diff))


def test_side_by_side_panel(rng, tmp_path):
    img = rng.uniform(size=(6, 5))
    panel = side_by_side(img, img, np.zeros((6, 5)), tmp_path / "p.png")
    assert panel.shape == (6, 5 * 3 + 4, 3)
    assert np.array_equal(panel[:, :5], panel[:, 7:12])
    assert np.all(panel[:, 14:] == NEUTRAL)
