import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trimodal.errors import InvalidArgument
from trimodal.video import (CENTER, FULL_FRAME, FramePreprocessor, FrameStack, RegionProvider,
                            center_square, crop_and_resize, frame_indices, preprocess_video,
                            sample_frames)


def stack(n, c=1, h=12, w=16, seed=0):
    return FrameStack(np.random.default_rng(seed).uniform(0, 1, (n, c, h, w)), f"clip{n}")


def test_indices_examples():
    np.testing.assert_array_equal(frame_indices(15, 15), np.arange(15))
    np.testing.assert_array_equal(frame_indices(90, 15), np.arange(0, 90, 6))
    np.testing.assert_array_equal(frame_indices(4, 15), [0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2, 3, 3, 3])
    with pytest.raises(InvalidArgument):
        frame_indices(0, 15)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 500), st.integers(1, 40))
def test_indices_nondecreasing_in_range(n, count):
    idx = frame_indices(n, count)
    assert len(idx) == count
    assert np.all(np.diff(idx) >= 0) and idx[0] >= 0 and idx[-1] < n


def test_sample_frames_keeps_order():
    v = stack(90)
    out = sample_frames(v, 15)
    np.testing.assert_array_equal(out.frames, v.frames[::6])


def test_framestack_validation():
    with pytest.raises(InvalidArgument):
        FrameStack(np.zeros((2, 2, 8, 8)))
    with pytest.raises(InvalidArgument):
        FrameStack(np.zeros((2, 1, 4, 8)))
    with pytest.raises(InvalidArgument):
        FrameStack(np.zeros((0, 1, 8, 8)))


def test_resize_identity_and_constant():
    f = np.random.default_rng(0).uniform(size=(3, 10, 12)).astype(np.float32)
    np.testing.assert_allclose(crop_and_resize(f, (0, 0, 12, 10), 10, 12), f, atol=1e-6)
    const = np.full((1, 9, 9), 0.37, dtype=np.float32)
    np.testing.assert_array_equal(crop_and_resize(const, (1, 1, 5, 7), 20, 13), np.float32(0.37))


def test_resize_corner_aligned_closed_form():
    f = np.array([[0.0, 1.0], [0.0, 1.0]])
    out = crop_and_resize(f, (0, 0, 2, 2), 2, 4)
    np.testing.assert_allclose(out, [[0, 1 / 3, 2 / 3, 1]] * 2, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 20), st.integers(2, 20), st.integers(1, 30), st.integers(1, 30), st.integers(0, 1000))
def test_resize_stays_within_source_range(h, w, oh, ow, seed):
    f = np.random.default_rng(seed).uniform(-3, 3, (h, w))
    out = crop_and_resize(f, (0, 0, w, h), oh, ow)
    assert out.shape == (oh, ow)
    assert out.min() >= f.min() - 1e-6 and out.max() <= f.max() + 1e-6


@pytest.mark.parametrize("box", [(0, 0, 0, 5), (-1, 0, 4, 4), (5, 5, 20, 20), (0, 0, 3)])
def test_degenerate_boxes_rejected(box):
    with pytest.raises(InvalidArgument):
        crop_and_resize(np.zeros((10, 10)), box, 4, 4)


def test_center_square():
    assert center_square(np.zeros((1, 40, 48))) == (4, 0, 40, 40)


def test_preprocess_identity_full_frame():
    v = stack(8, h=32, w=32)
    out = preprocess_video(v, FULL_FRAME, 8, 32, 32)
    np.testing.assert_allclose(out.frames, v.frames, atol=1e-6)


def test_failing_provider_falls_back_and_logs():
    v = stack(90, c=3, h=20, w=30)

    def broken(frame):
        raise RuntimeError("no face")

    log = []
    out = preprocess_video(v, RegionProvider("broken", broken), 15, 16, 16, log=log)
    ref = preprocess_video(v, CENTER, 15, 16, 16)
    np.testing.assert_array_equal(out.frames, ref.frames)
    assert out.frames.shape == (15, 3, 16, 16)
    assert len(log) == 1
    status, source, detail = log[0].split("\t")
    assert status == "fallback" and source == "clip90" and "no face" in detail


def test_out_of_frame_box_also_falls_back():
    v = stack(4)
    log = []
    preprocess_video(v, RegionProvider("wild", lambda f: (0, 0, 999, 999)), 4, 8, 8, log=log)
    assert log[0].startswith("fallback\t")


def test_transformer_wrapper():
    X = [stack(10).frames, stack(3).frames]
    pre = FramePreprocessor(count=5, out_h=8, out_w=8)
    out = pre.fit_transform(X)
    assert out.shape == (2, 5, 1, 8, 8)
    assert [line.split("\t")[0] for line in pre.log_] == ["ok", "ok"]
