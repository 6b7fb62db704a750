import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pcmcad.imgdata import BinaryMask, GrayImage16, GrayImage32
from pcmcad.morphology import make_line_se, open_array_naive
from pcmcad.phantoms import disc_mask, disc_phantom
from pcmcad.sifting import (ScaleBand, SiftConfig, SiftOutput, UnsupportedConfigError,
                            band_to_display16, compose_pcm, compute_scale_bands, mms_single_scale,
                            nearest_odd, read_band_raw, scale_to_8bit, sift, write_band_raw)

N = 18
INTENSITY = 10000


def np_open(img, se):
    """Opening by explicit shifted copies, clipped at the border."""
    def extremum(a, fn, fill, sign):
        h, w = a.shape
        pad = max(max(abs(dy), abs(dx)) for dy, dx in se.offsets)
        big = np.full((h + 2 * pad, w + 2 * pad), fill, dtype=a.dtype)
        big[pad:pad + h, pad:pad + w] = a
        out = np.full_like(a, fill)
        for dy, dx in se.offsets:
            dy, dx = sign * dy, sign * dx
            out = fn(out, big[pad + dy:pad + dy + h, pad + dx:pad + dx + w])
        return out
    return extremum(extremum(img, np.minimum, np.iinfo(img.dtype).max, 1), np.maximum, 0, -1)


def band_oracle(F, band, n, opener=np_open):
    acc = np.zeros(F.shape, dtype=np.uint64)
    for k in range(n):
        theta = k * 180.0 / n
        residue = F - opener(F, make_line_se(band.m2_rounded, theta))
        acc += opener(residue, make_line_se(band.m1_rounded, theta))
    return acc


# --- scale schedule ---------------------------------------------------------------

def test_default_scale_bands():
    b1, b2 = compute_scale_bands(SiftConfig())
    assert b1.m1_px == pytest.approx(15.61, abs=0.01)
    assert b1.m2_px == pytest.approx(61.81, abs=0.01)
    assert b2.m1_px == pytest.approx(61.81, abs=0.01)
    assert b2.m2_px == pytest.approx(244.77, abs=0.01)
    assert [b1.m1_rounded, b1.m2_rounded, b2.m1_rounded, b2.m2_rounded] == [15, 61, 61, 245]


def test_single_scale_spans_the_whole_range():
    (b,) = compute_scale_bands(SiftConfig(num_scales=1))
    k = 2 / (0.07 * 4)
    assert b.m1_px == pytest.approx(k * math.sqrt(15 / math.pi))
    assert b.m2_px == pytest.approx(k * math.sqrt(3689 / math.pi))


@given(st.floats(0.5, 50), st.floats(1.5, 1000), st.integers(1, 8), st.floats(0.01, 1))
def test_bands_contiguous_and_increasing(a_min, factor, scales, pixel):
    bands = compute_scale_bands(SiftConfig(a_min, a_min * factor, scales, 18, pixel))
    assert [b.index for b in bands] == list(range(1, scales + 1))
    for b in bands:
        assert b.m1_px < b.m2_px
    for lo, hi in zip(bands, bands[1:]):
        assert hi.m1_px == lo.m2_px


@given(st.floats(1, 50), st.floats(100, 5000), st.floats(1.01, 2))
def test_scale_edges_move_with_area_bounds(a_min, a_max, grow):
    base = compute_scale_bands(SiftConfig(a_min, a_max))
    assert compute_scale_bands(SiftConfig(a_min, a_max * grow))[-1].m2_px > base[-1].m2_px
    assert compute_scale_bands(SiftConfig(a_min / grow, a_max))[0].m1_px < base[0].m1_px


@pytest.mark.parametrize("x, want", [(15.61, 15), (61.81, 61), (244.77, 245), (16.0, 17),
                                     (14.0, 15), (15.0, 15), (0.2, 1), (2.0, 3)])
def test_nearest_odd(x, want):
    assert nearest_odd(x) == want


def test_config_validation():
    with pytest.raises(ValueError):
        SiftConfig(a_min_mm2=10, a_max_mm2=5)
    with pytest.raises(ValueError):
        SiftConfig(num_orientations=0)
    with pytest.raises(ValueError):
        SiftConfig.from_dict({"num_scale": 3})
    cfg = SiftConfig.from_dict({"num_orientations": 6})
    assert SiftConfig.from_dict(cfg.to_dict()) == cfg


# --- single-scale sifting on disc phantoms ---------------------------------------------

BAND1, BAND2 = compute_scale_bands(SiftConfig())


def test_constant_image_gives_zero():
    out = mms_single_scale(GrayImage16(np.full((40, 40), 777, np.uint16)), BAND1, N)
    assert not out.pixels.any()


def test_small_disc_vanishes():
    F = disc_phantom(41, 9, INTENSITY)
    out = mms_single_scale(GrayImage16(F), BAND1, N).pixels
    assert not out.any()
    assert not band_oracle(F, BAND1, N).any()


def test_in_band_disc_passes():
    F = disc_phantom(96, 30, INTENSITY)
    out = mms_single_scale(GrayImage16(F), BAND1, N).pixels
    assert np.array_equal(out, band_oracle(F, BAND1, N))
    assert out[47, 47] > 0 and out.max() >= 0.5 * N * INTENSITY
    assert not out[~disc_mask(96, 34)].any()


def test_large_disc_moves_to_band_two():
    size, d = 220, 100
    F = disc_phantom(size, d, INTENSITY)
    b1 = mms_single_scale(GrayImage16(F), BAND1, N).pixels
    b2 = mms_single_scale(GrayImage16(F), BAND2, N).pixels
    assert np.array_equal(b2, band_oracle(F, BAND2, N, open_array_naive))
    core = disc_mask(size, d - 2 * 6)
    assert b2[core].min() > 0
    assert b1[core].mean() < 0.1 * b2[core].mean()


def test_core_of_oversized_disc_is_zero():
    # a point at radius r lies on a segment of half-extent h inside the disc for
    # every angle iff r <= sqrt(R^2 - h^2).  The long opening keeps such points,
    # so they leave no residue.  h is measured on the discrete lines, whose
    # diagonal versions reach further than m2 / 2.
    size, d = 160, 121
    h = max(math.hypot(dy, dx) for k in range(N)
            for dy, dx in make_line_se(BAND1.m2_rounded, k * 180 / N).offsets)
    F = disc_phantom(size, d, INTENSITY)
    out = mms_single_scale(GrayImage16(F), BAND1, N).pixels
    core = math.sqrt((d / 2) ** 2 - h ** 2) - 1.0
    assert core > 20
    assert not out[disc_mask(size, 2 * core)].any()
    assert out[disc_mask(size, d)].any()  # the rim does leave a residue


@given(st.integers(5, 60), st.integers(0, 20))
def test_band_nonnegative_and_shape(d, seed):
    rng = np.random.default_rng(seed)
    F = (disc_phantom(48, d, 3000) + rng.integers(0, 500, (48, 48))).astype(np.uint16)
    band = ScaleBand(1, 5.0, 13.0)
    out = mms_single_scale(GrayImage16(F), band, 6).pixels
    assert out.dtype == np.uint32 and out.shape == F.shape
    assert np.array_equal(out, band_oracle(F, band, 6))


@given(st.integers(-12, 12), st.integers(-12, 12))
def test_disc_position_does_not_change_band_statistics(dy, dx):
    size, d = 128, 30
    centre = ((size - 1) / 2 + dy, (size - 1) / 2 + dx)
    ref = mms_single_scale(GrayImage16(disc_phantom(size, d, INTENSITY)), BAND1, 6).pixels
    moved = mms_single_scale(GrayImage16(disc_phantom(size, d, INTENSITY, centre)), BAND1, 6).pixels
    assert ref.sum() == moved.sum() and ref.max() == moved.max()


# --- full sift ----------------------------------------------------------------------

def test_sift_small_disc_lands_in_band_one():
    F = GrayImage16(disc_phantom(128, 30, INTENSITY))
    out = sift(F, SiftConfig())
    b1, b2 = (b.pixels for b in out.bands)
    assert b1[63, 63] > 0
    assert b2[63, 63] <= 0.05 * b1[63, 63]


def test_zero_image_all_bands_zero():
    out = sift(GrayImage16(np.zeros((64, 64), np.uint16)), SiftConfig(num_scales=3, num_orientations=4))
    assert len(out.bands) == 3 and not any(b.pixels.any() for b in out.bands)


# --- display scaling and pseudo-color -------------------------------------------------------

def test_scale_to_8bit_examples():
    assert scale_to_8bit(np.array([[0, 32768, 65535]], np.uint16)).tolist() == [[0, 128, 255]]
    assert not scale_to_8bit(np.full((3, 3), 9, np.uint16)).any()
    ramp = np.arange(256, dtype=np.uint16).reshape(16, 16)
    assert np.array_equal(scale_to_8bit(ramp), ramp)


def test_scale_to_8bit_region_clamps_outside():
    img = np.array([[10, 20, 30, 1000]], np.uint16)
    region = BinaryMask(np.array([[True, True, True, False]]))
    assert scale_to_8bit(img, region).tolist() == [[0, 128, 255, 255]]


@given(st.lists(st.integers(0, 2 ** 32 - 1), min_size=2, max_size=50))
def test_scale_to_8bit_formula(values):
    v = np.array(values, dtype=np.uint32).reshape(1, -1)
    lo, hi = min(values), max(values)
    want = [0] * len(values) if lo == hi else [math.floor(255 * (x - lo) / (hi - lo) + 0.5) for x in values]
    assert scale_to_8bit(v).ravel().tolist() == want


def _pcm_for_disc(size, d):
    gm = GrayImage16(disc_phantom(size, d, INTENSITY))
    pcm = compose_pcm(gm, sift(gm, SiftConfig()), None)
    c = size // 2
    return pcm, (int(pcm.r[c, c]), int(pcm.g[c, c]), int(pcm.b[c, c]))


def test_small_mass_is_yellow():
    _, (r, g, b) = _pcm_for_disc(128, 30)
    assert r > 200 and g > 200 and b < 60


def test_large_mass_is_purple():
    _, (r, g, b) = _pcm_for_disc(220, 100)
    assert r > 200 and b > 200 and g < 60


def test_pcm_channel_order():
    gm = GrayImage16(np.arange(16, dtype=np.uint16).reshape(4, 4))
    b1 = GrayImage32(np.eye(4, dtype=np.uint32) * 5)
    b2 = GrayImage32(np.fliplr(np.eye(4, dtype=np.uint32)) * 7)
    pcm = compose_pcm(gm, SiftOutput([b1, b2], SiftConfig()))
    assert np.array_equal(pcm.r, scale_to_8bit(gm))
    assert np.array_equal(pcm.g, np.eye(4) * 255)
    assert np.array_equal(pcm.b, np.fliplr(np.eye(4)) * 255)


def test_zero_bands_render_red_only():
    gm = GrayImage16(disc_phantom(32, 10, 500))
    zero = GrayImage32(np.zeros((32, 32), np.uint32))
    pcm = compose_pcm(gm, SiftOutput([zero, zero], SiftConfig()))
    assert pcm.r.any() and not pcm.g.any() and not pcm.b.any()


def test_pcm_refuses_other_scale_counts():
    gm = GrayImage16(np.zeros((8, 8), np.uint16))
    zero = GrayImage32(np.zeros((8, 8), np.uint32))
    with pytest.raises(UnsupportedConfigError):
        compose_pcm(gm, SiftOutput([zero] * 3, SiftConfig(num_scales=3)))


# --- band storage ---------------------------------------------------------------------

def test_raw_band_round_trip(tmp_path, rng):
    band = GrayImage32(rng.integers(0, 2 ** 32, (13, 21), dtype=np.uint32))
    write_band_raw(band, tmp_path / "b.raw")
    data = (tmp_path / "b.raw").read_bytes()
    assert data[:8] == (21).to_bytes(4, "little") + (13).to_bytes(4, "little")
    assert np.array_equal(read_band_raw(tmp_path / "b.raw").pixels, band.pixels)


def test_raw_band_rejects_bad_sizes(tmp_path):
    (tmp_path / "a.raw").write_bytes(b"\x01\x00")
    (tmp_path / "b.raw").write_bytes(np.array([2, 2, 0, 0, 0], "<u4").tobytes())
    for name in ("a.raw", "b.raw"):
        with pytest.raises(ValueError):
            read_band_raw(tmp_path / name)


def test_display_band_averages_orientations():
    band = GrayImage32(np.array([[0, 8, 9, 18 * 65535 + 100]], np.uint32))
    assert band_to_display16(band, 18).pixels.tolist() == [[0, 0, 1, 65535]]
