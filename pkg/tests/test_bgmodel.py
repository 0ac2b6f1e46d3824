import numpy as np
import pytest
from hypothesis import given, strategies as st

from cseg.bgmodel import (BM_MODES, BackgroundModel, FluxBuffer, NaiveSegmenter, PixelLibrary, flux_threshold,
                          flux_trace, lowpass_fs, memory_length, motion_fraction, motion_mask, naive_segment,
                          padding_radius, render_background, update_library)
from cseg.errors import FormatError, InputError, NotReadyError
from cseg.imagecore import BG, FG
from cseg.synthetic import bouncing_square_video


# -- flux tensor ----------------------------------------------------------------

def flux_oracle(frames, integration=5):
    """Pointwise evaluation of the discrete trace with explicit loops."""
    t_len, h, w = frames.shape

    def at(t, y, x):
        return frames[t, min(max(y, 0), h - 1), min(max(x, 0), w - 1)]

    def ix(t, y, x):
        return (at(t, y, x + 1) - at(t, y, x - 1)) / 2.0

    def iy(t, y, x):
        return (at(t, y + 1, x) - at(t, y - 1, x)) / 2.0

    def it(t, y, x):
        return (at(t + 1, y, x) - at(t - 1, y, x)) / 2.0

    energy = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            ixt = (ix(3, y, x) - ix(1, y, x)) / 2.0
            iyt = (iy(3, y, x) - iy(1, y, x)) / 2.0
            itt = (it(3, y, x) - it(1, y, x)) / 2.0
            energy[y, x] = ixt ** 2 + iyt ** 2 + itt ** 2
    r = integration // 2
    out = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            out[y, x] = energy[max(y - r, 0):y + r + 1, max(x - r, 0):x + r + 1].sum()
    return out


def fill(frames):
    buf = FluxBuffer()
    for f in frames:
        buf.push(f)
    return buf


def moving_edge(h=12, w=20, c0=6):
    frames = np.zeros((5, h, w))
    for t in range(5):
        frames[t, :, c0 + t:] = 1.0
    return frames


def test_flux_static_is_zero(rng):
    f = rng.random((9, 11))
    assert np.all(flux_trace(fill([f] * 5)) == 0.0)


def test_flux_not_ready():
    buf = fill([np.zeros((4, 4))] * 4)
    assert not buf.ready
    with pytest.raises(NotReadyError):
        flux_trace(buf)


def test_flux_brightened_centre_frame_positive():
    base = np.full((7, 7), 0.4)
    frames = np.stack([base] * 5)
    frames[2] += 0.1
    trace = flux_trace(fill(frames))
    assert np.all(trace[1:-1, 1:-1] > 0)
    assert np.allclose(trace, flux_oracle(frames), atol=1e-9, rtol=0)


def test_flux_moving_edge_matches_oracle_and_is_localised():
    frames = moving_edge()
    trace = flux_trace(fill(frames))
    assert np.allclose(trace, flux_oracle(frames), atol=1e-9, rtol=0)
    cols = np.nonzero(trace.max(axis=0) > 0)[0]
    # changing columns 6..10, widened by one gradient tap and the 5x5 box
    assert cols.min() >= 6 - 3 and cols.max() <= 10 + 3
    assert 6 <= int(trace.max(axis=0).argmax()) <= 10


@given(st.integers(0, 2**31 - 1), st.floats(-0.3, 0.3))
def test_flux_properties(seed, offset):
    frames = np.random.default_rng(seed).random((5, 6, 8))
    trace = flux_trace(fill(frames))
    assert np.all(trace >= 0)
    assert np.allclose(trace, flux_oracle(frames), atol=1e-9, rtol=0)
    assert np.allclose(flux_trace(fill(frames + offset)), trace, atol=1e-9)


def test_flux_buffer_rejects_mixed_sizes():
    buf = fill([np.zeros((4, 4))])
    with pytest.raises(InputError):
        buf.push(np.zeros((4, 5)))


def test_motion_mask_and_fraction():
    assert np.all(motion_mask(np.zeros((3, 3)), 0.5) == BG)
    assert np.all(motion_mask(np.full((3, 3), 1e-9), 0.0) == FG)
    assert motion_mask(np.array([0.0, 0.5, 2.0]), 1.0).tolist() == [BG, BG, FG]
    assert motion_fraction(np.zeros((4, 4))) == 0.0
    assert motion_fraction(np.ones((4, 4))) == 1.0
    m = np.zeros((10, 20), np.uint8)
    m.flat[:30] = FG
    assert motion_fraction(m) == pytest.approx(0.15)
    with pytest.raises(InputError):
        motion_mask(np.zeros(3), -1.0)


def test_flux_threshold_floor():
    assert flux_threshold(np.zeros((4, 4))) == 1e-4
    assert flux_threshold(np.full((4, 4), 1.0)) == pytest.approx(3.0)


# -- motion-driven parameters -------------------------------------------------------

def test_lowpass_examples():
    assert lowpass_fs(0.5, 0.1) == pytest.approx(0.42, abs=1e-12)
    assert lowpass_fs(0.1, 0.5) == pytest.approx(0.104, abs=1e-12)
    assert lowpass_fs(0.3, 0.3) == 0.3


@given(st.floats(0, 1), st.floats(0, 1))
def test_lowpass_is_convex(prev, raw):
    out = lowpass_fs(prev, raw)
    assert min(prev, raw) - 1e-15 <= out <= max(prev, raw) + 1e-15
    assert 0.0 <= out <= 1.0


@pytest.mark.parametrize("mode", BM_MODES)
def test_memory_length_knees(mode):
    assert memory_length(0.02, mode) == 90
    assert memory_length(0.0, mode) == 90
    assert memory_length(0.25, mode) == 5
    assert memory_length(0.9, mode) == 5
    assert memory_length(0.135, mode) == pytest.approx(47.5, abs=1e-9)


def test_memory_length_as_printed_ramp_rises():
    assert memory_length(0.05, "as-printed") < memory_length(0.2, "as-printed")
    with pytest.raises(InputError):
        memory_length(0.1, "sideways")


@given(st.floats(0, 1), st.floats(0, 1))
def test_memory_length_monotone_bounded(a, b):
    lo, hi = min(a, b), max(a, b)
    assert 5 <= memory_length(hi) <= memory_length(lo) <= 90


def test_memory_length_continuous_inside():
    xs = np.linspace(0.0201, 0.2499, 2000)
    ys = np.array([memory_length(x) for x in xs])
    assert np.max(np.abs(np.diff(ys))) < 0.1
    assert memory_length(0.02 + 1e-12) == pytest.approx(90, abs=1e-6)
    assert memory_length(0.25 - 1e-12) == pytest.approx(5, abs=1e-6)


def test_padding_radius():
    assert padding_radius(0.0) == 1
    assert padding_radius(0.5) == 5
    assert padding_radius(0.135) == 3


@given(st.floats(0, 1), st.floats(0, 1))
def test_padding_radius_monotone(a, b):
    lo, hi = min(a, b), max(a, b)
    assert 1 <= padding_radius(lo) <= padding_radius(hi) <= 5


# -- pixel library ---------------------------------------------------------------------

def lib_with_recent_ones(n_ones=5):
    lib = PixelLibrary.bootstrap(np.zeros((4, 5, 3), np.float32))
    bg = np.zeros((4, 5), np.uint8)
    for _ in range(n_ones):
        update_library(lib, np.ones((4, 5, 3), np.float32), bg, 0)
    return lib


def test_render_constant():
    lib = PixelLibrary.bootstrap(np.full((3, 3, 3), 0.3, np.float32))
    for bm in (1, 5, 47.5, 90):
        assert np.allclose(render_background(lib, bm), 0.3)


def test_render_recent_window():
    lib = lib_with_recent_ones()
    assert np.allclose(render_background(lib, 5), 1.0)
    assert np.allclose(render_background(lib, 90), 5 / 90, atol=1e-7)
    assert np.allclose(render_background(lib, 1), 1.0)


def test_render_partial_fill_and_seed_fallback():
    lib = PixelLibrary(2, 2)
    lib.seed[:] = 0.7
    assert np.allclose(lib.render(10), 0.7)
    lib.update(np.full((2, 2, 3), 0.2, np.float32), np.array([[BG, FG], [FG, FG]], np.uint8), 0)
    lib.update(np.full((2, 2, 3), 0.4, np.float32), np.array([[BG, FG], [FG, FG]], np.uint8), 0)
    out = lib.render(10)
    assert np.allclose(out[0, 0], 0.3) and np.allclose(out[1, 1], 0.7)


def test_running_sum_matches_direct_mean(rng):
    lib = PixelLibrary.bootstrap(rng.random((6, 7, 3)).astype(np.float32))
    for _ in range(200):
        fg = (rng.random((6, 7)) < 0.3).astype(np.uint8)
        lib.update(rng.random((6, 7, 3)).astype(np.float32), fg, int(rng.integers(0, 2)))
    direct = lib.samples.mean(axis=0, dtype=np.float64)
    assert np.allclose(lib.render(90), direct, atol=1e-6)


def test_update_all_bg_and_all_fg():
    lib = PixelLibrary.bootstrap(np.zeros((3, 4, 3), np.float32))
    before = lib.bi.copy()
    lib.update(np.ones((3, 4, 3), np.float32), np.zeros((3, 4), np.uint8), 0)
    assert np.all(lib.bi == (before + 1) % 90)
    snap = lib.samples.copy(), lib.bi.copy()
    lib.update(np.full((3, 4, 3), 0.5, np.float32), np.ones((3, 4), np.uint8), 3)
    assert np.array_equal(lib.samples, snap[0]) and np.array_equal(lib.bi, snap[1])


def test_update_skips_padded_neighbourhood():
    lib = PixelLibrary.bootstrap(np.zeros((7, 7, 3), np.float32))
    fg = np.zeros((7, 7), np.uint8)
    fg[3, 3] = FG
    written = lib.update(np.ones((7, 7, 3), np.float32), fg, 1)
    assert not written[2:5, 2:5].any() and written.sum() == 49 - 9
    assert np.all(lib.bi[2:5, 2:5] == 0)


@given(st.integers(0, 2**31 - 1), st.integers(0, 3))
def test_update_never_writes_dilated_fg(seed, pad):
    r = np.random.default_rng(seed)
    lib = PixelLibrary.bootstrap(r.random((8, 9, 3)).astype(np.float32))
    fg = (r.random((8, 9)) < 0.15).astype(np.uint8)
    before_s, before_bi = lib.samples.copy(), lib.bi.copy()
    written = lib.update(r.random((8, 9, 3)).astype(np.float32), fg, pad)
    from cseg.imagecore import dilate
    blocked = dilate(fg, pad) == FG
    assert not np.any(written & blocked)
    assert np.array_equal(lib.samples[:, blocked], before_s[:, blocked])
    assert np.array_equal(lib.bi[written], (before_bi[written] + 1) % 90)
    assert np.array_equal(lib.bi[~written], before_bi[~written])
    assert np.all((lib.fill >= 1) & (lib.fill <= 90))


def test_update_shape_mismatch():
    lib = PixelLibrary.bootstrap(np.zeros((3, 3, 3), np.float32))
    with pytest.raises(InputError):
        lib.update(np.zeros((3, 4, 3)), np.zeros((3, 4), np.uint8), 0)


# -- naive segmenter ---------------------------------------------------------------------

def test_naive_segment_examples(rng):
    f = rng.random((6, 6, 3))
    assert np.all(naive_segment(f, f) == BG)
    g = f.copy()
    g[2, 3, 1] += 0.5
    m = naive_segment(g, f, 0.1)
    assert m[2, 3] == FG and m.sum() == 1


@given(st.integers(0, 2**31 - 1), st.floats(0, 1))
def test_naive_segment_oracle(seed, tau):
    r = np.random.default_rng(seed)
    f, b = r.random((5, 6, 3)), r.random((5, 6, 3))
    expected = np.array([[FG if max(abs(f[y, x, k] - b[y, x, k]) for k in range(3)) > tau else BG
                          for x in range(6)] for y in range(5)])
    assert np.array_equal(naive_segment(f, b, tau), expected)


def test_naive_segmenter_releases_ghosts():
    seg = NaiveSegmenter(tau=0.1, max_fg_run=3)
    f, b = np.ones((2, 2, 3)), np.zeros((2, 2, 3))
    runs = [seg(f, b)[0, 0] for _ in range(5)]
    assert runs == [FG, FG, FG, BG, BG]


# -- the full model ------------------------------------------------------------------------

def test_step_wrong_size():
    m = BackgroundModel(10, 12)
    with pytest.raises(InputError):
        m.step(np.zeros((10, 13, 3)))


def test_step_uses_full_memory_until_flux_ready():
    m = BackgroundModel(10, 12)
    for i in range(4):
        _, st_ = m.step(np.zeros((10, 12, 3)))
        assert st_.bm == 90 and st_.padding_radius == 1 and not st_.flux_ready
    _, st_ = m.step(np.zeros((10, 12, 3)))
    assert st_.flux_ready


def test_static_video_converges_and_contracts(rng):
    scene = rng.uniform(0.2, 0.8, (16, 20, 3)).astype(np.float32)
    m = BackgroundModel(16, 20)
    m.step(np.clip(scene + 0.05, 0, 1))  # library seeded off by 0.05, still labelled BG
    dists = []
    for _ in range(90):
        bg, _ = m.step(scene)
        dists.append(float(np.abs(bg - scene).max()))
    assert all(b <= a + 1e-7 for a, b in zip(dists, dists[1:]))
    assert dists[-1] <= 1 / 255


def test_bouncing_square_background_converges():
    video = bouncing_square_video(0)
    assert ((video.labels == FG).mean(axis=0) < 0.10).all()
    m = BackgroundModel(120, 160)
    for f in video.frames:
        bg, _ = m.step(f)
    assert np.abs(bg - video.background).max() <= 2 / 255


def test_checkpoint_round_trip(tmp_path, rng):
    frames = rng.random((12, 8, 10, 3)).astype(np.float32)
    a = BackgroundModel(8, 10, bm_mode="as-printed")
    for f in frames[:7]:
        a.step(f)
    a.save(tmp_path / "bg.ckpt")
    b = BackgroundModel.load(tmp_path / "bg.ckpt")
    b.hook.run = a.hook.run.copy()  # segmenter state is not part of the checkpoint
    assert b.bm_mode == "as-printed" and b.frames_seen == 7
    for f in frames[7:]:
        ba, sa = a.step(f)
        bb, sb = b.step(f)
        assert np.array_equal(ba, bb) and sa == sb


def test_checkpoint_errors(tmp_path):
    a = BackgroundModel(4, 4)
    with pytest.raises(InputError):
        a.save(tmp_path / "x")
    a.step(np.zeros((4, 4, 3)))
    path = tmp_path / "bg.ckpt"
    a.save(path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-10])
    with pytest.raises(FormatError):
        BackgroundModel.load(path)
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError, match="not a background"):
        BackgroundModel.load(path)
    path.write_bytes(raw[:4] + (7).to_bytes(4, "little") + raw[8:])
    with pytest.raises(FormatError, match="version 7"):
        BackgroundModel.load(path)


def test_unknown_mode():
    with pytest.raises(InputError):
        BackgroundModel(4, 4, bm_mode="nope")
