import filecmp
import json
import os

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from trimodal import tmf
from trimodal.audio import read_wav
from trimodal.dataset import (SampleRecord, SynthConfig, format_filename, parse_filename,
                              scan_dataset, split, synth_face, synth_generate, synth_sample)
from trimodal.diffcore.rng import RngStream
from trimodal.errors import EmptyDatasetError, InvalidArgument, ParseError, SplitError


@pytest.mark.parametrize("name,expected", [
    ("01_01_1.mp4", (1, "safe", 1, "face")),
    ("03_02_5.wav", (3, "dangerous", 5, "audio")),
    ("01_01_1_r.mp4", (1, "safe", 1, "road")),
    ("12_02_40_r.tmf", (12, "dangerous", 40, "road")),
])
def test_parse_documented_forms(name, expected):
    info = parse_filename(name)
    assert (info["session"], info["label"], info["index"], info["modality"]) == expected


@pytest.mark.parametrize("name,field", [
    ("01_03_1.mp4", "label"), ("1_01_1.mp4", "session"), ("01_01.mp4", "layout"),
    ("01_01_1_r.wav", "suffix"), ("01_01_1.avi", "extension"), ("aa_01_1.mp4", "layout"),
])
def test_parse_errors_name_field(name, field):
    with pytest.raises(ParseError) as info:
        parse_filename(name)
    assert info.value.field == field
    assert field in str(info.value)


@given(st.integers(1, 99), st.sampled_from(["safe", "dangerous"]), st.integers(1, 999),
       st.sampled_from(["audio", "face", "road"]), st.sampled_from([None, "mp4"]))
def test_format_parse_roundtrip(session, label, index, modality, ext):
    if modality == "audio":
        ext = None
    info = parse_filename(format_filename(session, label, index, modality, ext))
    assert info == {"session": session, "label": label, "index": index, "modality": modality}


def _touch_triple(d, session, code, index, skip=()):
    for suffix, ext in (("", "wav"), ("", "tmf"), ("_r", "tmf")):
        name = f"{session:02d}_{code}_{index}{suffix}.{ext}"
        if name not in skip:
            (d / name).write_bytes(b"")


def test_scan_counts(tmp_path):
    for i in range(1, 21):
        _touch_triple(tmp_path, 1, "01" if i % 2 else "02", i)
    _touch_triple(tmp_path, 2, "01", 1, skip=("02_01_1_r.tmf",))
    _touch_triple(tmp_path, 2, "01", 2, skip=("02_01_2.wav",))
    _touch_triple(tmp_path, 2, "02", 3, skip=("02_02_3.tmf", "02_02_3_r.tmf"))
    (tmp_path / "notes.txt").write_text("ignored")
    (tmp_path / "xx_01_1.wav").write_bytes(b"")
    records, report = scan_dataset(tmp_path)
    assert len(records) == 20
    assert sum(line.startswith("incomplete") for line in report) == 3
    assert sum(line.startswith("unparseable") for line in report) == 1
    assert all(set(r.paths) == {"audio", "face", "road"} for r in records)


def test_scan_prefers_tmf_and_handles_empty(tmp_path):
    _touch_triple(tmp_path, 1, "01", 1)
    (tmp_path / "01_01_1.mp4").write_bytes(b"")
    records, _ = scan_dataset(tmp_path)
    assert records[0].paths["face"].endswith(".tmf")
    empty = tmp_path / "empty"
    empty.mkdir()
    _touch_triple(empty, 1, "01", 1, skip=("01_01_1_r.tmf",))
    with pytest.raises(EmptyDatasetError):
        scan_dataset(empty)


def _records(n_per_class):
    return [SampleRecord(1 + k // 20, label, k, {}) for label in ("safe", "dangerous")
            for k in range(n_per_class)]


def test_split_stratified_deterministic():
    recs = _records(100)
    train, val = split(recs, 0.25, seed=3)
    assert (len(train), len(val)) == (150, 50)
    assert sum(r.label == "safe" for r in val) == 25
    assert {r.key for r in train} | {r.key for r in val} == {r.key for r in recs}
    assert not {r.key for r in train} & {r.key for r in val}
    again = split(recs, 0.25, seed=3)
    assert [r.key for r in again[1]] == [r.key for r in val]
    assert [r.key for r in split(recs, 0.25, seed=4)[1]] != [r.key for r in val]
    assert all(r.split == "val" for r in val)


def test_split_errors():
    with pytest.raises(SplitError):
        split(_records(1), 0.25)
    with pytest.raises(SplitError):
        split(_records(5), 1.0)


def test_synth_config_validation():
    with pytest.raises(InvalidArgument):
        SynthConfig(n_samples=3)
    with pytest.raises(InvalidArgument):
        SynthConfig(q_face=1.5)
    with pytest.raises(InvalidArgument):
        SynthConfig.from_dict({"q_audoi": 0.1})


SMALL = SynthConfig(n_samples=8, sample_rate=8000, clip_seconds=0.5, frame_height=16,
                    frame_width=20, frames_per_clip=6, samples_per_session=4)


def test_synth_generate_layout_and_determinism(tmp_path):
    m1 = synth_generate(SMALL, tmp_path / "a")
    synth_generate(SMALL, tmp_path / "b")
    names = sorted(os.listdir(tmp_path / "a"))
    assert len(names) == 3 * 8 + 1
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    records, report = scan_dataset(tmp_path / "a")
    assert len(records) == 8 and not report
    assert sum(r.label == "dangerous" for r in records) == 4
    r = records[0]
    assert tmf.load(r.paths["face"]).shape == (6, 1, 16, 20)
    assert len(read_wav(r.paths["audio"])) == 4000
    assert json.load(open(tmp_path / "a" / "manifest.json"))["records"] == m1["records"]


def test_no_signal_when_q_zero():
    cfg = SynthConfig(n_samples=8, q_audio=0, q_face=0, q_road=0)
    for k in range(8):
        assert not any(synth_sample(k, cfg)["signatures"].values())


def test_signatures_conditionally_independent():
    cfg = SynthConfig(n_samples=2000)
    gens = [RngStream(cfg.seed, k).generator() for k in range(1, 2000, 2)]
    sig = np.array([[g.random() < q for q in (cfg.q_audio, cfg.q_face, cfg.q_road)] for g in gens])
    # the same draws synth_sample makes for dangerous samples
    ref = np.array([list(synth_sample(k, cfg)["signatures"].values()) for k in range(1, 41, 2)])
    np.testing.assert_array_equal(sig[:20], ref)
    corr = np.corrcoef(sig.T.astype(float))
    assert np.all(np.abs(corr[np.triu_indices(3, 1)]) < 0.1)
    np.testing.assert_allclose(sig.mean(axis=0), [0.60, 0.95, 0.85], atol=0.05)


def _max_displacement(frames):
    pts = []
    for f in frames[:, 0]:
        w = f - f.min()
        yy, xx = np.mgrid[:f.shape[0], :f.shape[1]]
        pts.append([(w * yy).sum() / w.sum(), (w * xx).sum() / w.sum()])
    return np.abs(np.diff(np.array(pts), axis=0)).max()


def test_oracle_displacement_detector_separates_face_signature():
    cfg = SynthConfig(q_face=1.0, pixel_noise=0.0)
    side = min(cfg.frame_height, cfg.frame_width)
    for k in range(20):
        gen = RngStream(k, 2).generator()
        safe, _ = synth_face(gen, cfg, danger=False)
        danger, _ = synth_face(RngStream(k, 3).generator(), cfg, danger=True)
        assert _max_displacement(safe) < 0.1 * side < _max_displacement(danger)
