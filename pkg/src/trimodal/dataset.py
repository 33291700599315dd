"""Dataset naming convention, directory scanning, synthetic generation and splitting.

Files follow ``SS_LL_I[_r].ext``: ``SS`` is the zero-padded collection
session, ``LL`` the label code (``01`` safe, ``02`` dangerous), ``I`` the
sample index within the session.  Audio is ``.wav``; face video has no
suffix and road video carries ``_r``.  Video may be ``.mp4`` or the raw
``.tmf`` frame stacks this package reads.
"""
import json
import os
import re
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tmf
from .audio import Waveform, write_wav
from .diffcore.rng import RngStream
from .errors import EmptyDatasetError, InvalidArgument, ParseError, SplitError

LABEL_CODES = {"01": "safe", "02": "dangerous"}
LABEL_IDS = {"safe": 0, "dangerous": 1}
_NAME = re.compile(r"^(?P<session>\d+)_(?P<label>\d+)_(?P<index>\d+)(?P<road>_r)?\.(?P<ext>[A-Za-z0-9]+)$")
AUDIO_EXT = ("wav",)
VIDEO_EXT = ("tmf", "mp4")


@dataclass
class SampleRecord:
    session: int
    label: str
    index: int
    paths: dict = field(default_factory=dict)
    split: str = "train"

    @property
    def stem(self):
        return format_stem(self.session, self.label, self.index)

    @property
    def label_id(self):
        return LABEL_IDS[self.label]

    @property
    def key(self):
        return (self.session, self.label, self.index)


def format_stem(session, label, index):
    code = {v: k for k, v in LABEL_CODES.items()}[label]
    return f"{session:02d}_{code}_{index}"


def format_filename(session, label, index, modality, ext=None):
    stem = format_stem(session, label, index)
    if modality == "audio":
        return f"{stem}.{ext or 'wav'}"
    if modality == "face":
        return f"{stem}.{ext or 'tmf'}"
    if modality == "road":
        return f"{stem}_r.{ext or 'tmf'}"
    raise InvalidArgument(f"unknown modality {modality!r}")


def parse_filename(name):
    """``"01_02_3_r.mp4"`` -> ``{"session": 1, "label": "dangerous", "index": 3, "modality": "road"}``."""
    base = os.path.basename(name)
    m = _NAME.match(base)
    if not m:
        if base.count("_") < 2:
            raise ParseError(base, "layout", "expected SS_LL_I[_r].ext")
        raise ParseError(base, "layout", "fields must be numeric")
    if len(m["session"]) < 2:
        raise ParseError(base, "session", "must be zero-padded to two digits")
    if m["label"] not in LABEL_CODES:
        raise ParseError(base, "label", f"code {m['label']!r} is neither 01 (safe) nor 02 (dangerous)")
    ext = m["ext"].lower()
    if ext in AUDIO_EXT:
        if m["road"]:
            raise ParseError(base, "suffix", "audio files carry no _r suffix")
        modality = "audio"
    elif ext in VIDEO_EXT:
        modality = "road" if m["road"] else "face"
    else:
        raise ParseError(base, "extension", f".{ext} is not one of wav, mp4, tmf")
    return {"session": int(m["session"]), "label": LABEL_CODES[m["label"]],
            "index": int(m["index"]), "modality": modality}


def scan_dataset(directory):
    """Group ``directory``'s files into complete (audio, face, road) triples.

    Returns ``(records, report)`` where ``report`` lists one line per
    incomplete triple or unparseable data file.
    """
    groups, report = {}, []
    for name in sorted(os.listdir(directory)):
        ext = name.rsplit(".", 1)[-1].lower() if "." in name else ""
        if ext not in AUDIO_EXT + VIDEO_EXT:
            continue
        try:
            info = parse_filename(name)
        except ParseError as exc:
            report.append(f"unparseable\t{name}\t{exc}")
            continue
        key = (info["session"], info["label"], info["index"])
        slot = groups.setdefault(key, {})
        previous = slot.get(info["modality"])
        # raw tensors win over containers we cannot decode
        if previous is None or previous.endswith(".mp4"):
            slot[info["modality"]] = os.path.join(directory, name)
    records = []
    for key in sorted(groups):
        paths = groups[key]
        missing = [m for m in ("audio", "face", "road") if m not in paths]
        if missing:
            report.append(f"incomplete\t{format_stem(*key)}\tmissing {', '.join(missing)}")
            continue
        records.append(SampleRecord(key[0], key[1], key[2], dict(paths)))
    if not records:
        raise EmptyDatasetError(f"no complete audio/face/road triples in {directory}")
    return records, report


def split(records, val_fraction=0.25, seed=0):
    """Stratified, seeded train/val split; returns two new record lists."""
    if not 0 < val_fraction < 1:
        raise SplitError("val_fraction must lie strictly between 0 and 1")
    by_label = {}
    for r in records:
        by_label.setdefault(r.label, []).append(r)
    gen = RngStream(seed, 0x5917).generator()
    train, val = [], []
    for label in sorted(by_label):
        group = sorted(by_label[label], key=lambda r: r.key)
        if len(group) < 2:
            raise SplitError(f"class {label!r} has {len(group)} record(s); need at least 2")
        order = gen.permutation(len(group))
        n_val = min(max(int(round(len(group) * val_fraction)), 1), len(group) - 1)
        for rank, i in enumerate(order):
            r = group[i]
            dest = val if rank < n_val else train
            dest.append(SampleRecord(r.session, r.label, r.index, dict(r.paths),
                                     "val" if rank < n_val else "train"))
    key = lambda r: r.key  # noqa: E731
    return sorted(train, key=key), sorted(val, key=key)


# -- synthetic data ---------------------------------------------------------------

@dataclass
class SynthConfig:
    n_samples: int = 400
    class_balance: float = 0.5
    sample_rate: int = 8000
    clip_seconds: float = 1.0
    frame_height: int = 40
    frame_width: int = 48
    frame_channels: int = 1
    frames_per_clip: int = 16
    q_audio: float = 0.60
    q_face: float = 0.95
    q_road: float = 0.85
    audio_noise: float = 0.1
    pixel_noise: float = 0.05
    samples_per_session: int = 20
    seed: int = 0

    def __post_init__(self):
        for name in ("q_audio", "q_face", "q_road"):
            if not 0 <= getattr(self, name) <= 1:
                raise InvalidArgument(f"{name} must lie in [0, 1]")
        if self.n_samples < 2 or self.n_samples % 2:
            raise InvalidArgument("n_samples must be a positive even number")
        if self.class_balance != 0.5:
            raise InvalidArgument("only balanced (0.5) synthetic datasets are supported")
        if self.frame_height < 8 or self.frame_width < 8 or self.frame_channels not in (1, 3):
            raise InvalidArgument("frames must be at least 8x8 with 1 or 3 channels")
        if self.frames_per_clip < 4:
            raise InvalidArgument("need at least 4 frames per clip")
        if self.samples_per_session < 2 or self.samples_per_session % 2:
            raise InvalidArgument("samples_per_session must be a positive even number")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidArgument(f"unknown dataset config key {sorted(unknown)[0]!r}")
        return cls(**d)


def sample_identity(k, cfg):
    """(session, label, index) of the k-th synthetic sample; labels alternate."""
    label = "safe" if k % 2 == 0 else "dangerous"
    per_label = cfg.samples_per_session // 2
    session = k // cfg.samples_per_session + 1
    index = (k // 2) % per_label + 1
    return session, label, index


def _band_noise(gen, n, sr, cutoff_hz, rms):
    spec = np.fft.rfft(gen.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / sr)
    spec[freqs > cutoff_hz] = 0
    x = np.fft.irfft(spec, n)
    return x * (rms / max(np.sqrt(np.mean(x ** 2)), 1e-12))


def synth_audio(gen, cfg, danger):
    n = int(round(cfg.clip_seconds * cfg.sample_rate))
    sr = cfg.sample_rate
    x = _band_noise(gen, n, sr, min(400.0, sr / 4), cfg.audio_noise)
    # a faint tone both classes share, so the detector has to find the chirp
    f0 = gen.uniform(150, 300)
    x += 0.05 * np.sin(2 * np.pi * f0 * np.arange(n) / sr + gen.uniform(0, 2 * np.pi))
    if danger:
        dur = int(0.25 * sr)
        start = int(gen.integers(0, max(n - dur, 1)))
        t = np.arange(dur) / sr
        f_lo, f_hi = 600.0, min(900.0, 0.45 * sr)
        phase = 2 * np.pi * (f_lo * t + 0.5 * (f_hi - f_lo) / t[-1] * t ** 2)
        burst = 0.3 * np.hanning(dur) * np.sin(phase)
        x[start:start + dur] += burst[:n - start]
    return Waveform(np.clip(x, -1, 1), sr)


def _blob(h, w, cy, cx, sigma):
    yy, xx = np.mgrid[0:h, 0:w]
    return np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))


def synth_face(gen, cfg, danger):
    """Returns ``(frames [F, C, H, W], blob centers [F, 2])``."""
    f, h, w = cfg.frames_per_clip, cfg.frame_height, cfg.frame_width
    side = min(h, w)
    y0, x0 = (h - side) / 2, (w - side) / 2
    center = np.array([y0 + side / 2, x0 + side / 2]) + gen.uniform(-2, 2, 2)
    velocity = gen.uniform(-0.5, 0.5, 2)
    jump_at = int(gen.integers(f // 4, 3 * f // 4)) if danger else -1
    jump = None
    if danger:
        angle = gen.uniform(0, 2 * np.pi)
        jump = 0.3 * side * np.array([np.sin(angle), np.cos(angle)])
    frames = np.empty((f, cfg.frame_channels, h, w))
    centers = np.empty((f, 2))
    lo = np.array([y0 + 0.2 * side, x0 + 0.2 * side])
    hi = np.array([y0 + 0.8 * side, x0 + 0.8 * side])
    for i in range(f):
        if i == jump_at:
            center = np.clip(center + jump, lo, hi)
            if np.linalg.norm(center - centers[i - 1]) < 0.2 * side:
                center = np.clip(centers[i - 1] - jump, lo, hi)
        elif i > 0:
            center = np.clip(center + velocity + gen.normal(0, 0.1, 2), lo, hi)
        centers[i] = center
        img = 0.2 + 0.6 * _blob(h, w, center[0], center[1], side / 10)
        if danger and jump_at <= i < jump_at + 4:
            img = img + 0.25
        img = img + gen.normal(0, cfg.pixel_noise, (h, w))
        frames[i] = np.clip(img, 0, 1)[None]
    return frames, centers


def synth_road(gen, cfg, danger):
    f, h, w = cfg.frames_per_clip, cfg.frame_height, cfg.frame_width
    period = max(w // 4, 4)
    speed = gen.uniform(0.5, 2.0)
    phase = gen.uniform(0, period)
    appear = int(gen.integers(0, f // 2)) if danger else f
    oy = int(gen.integers(h // 2, 3 * h // 4))
    ox = int(gen.integers(w // 4, 3 * w // 4))
    frames = np.empty((f, cfg.frame_channels, h, w))
    cols = np.arange(w)
    for i in range(f):
        stripes = ((cols + phase + speed * i) % period) < period / 4
        img = np.full((h, w), 0.35)
        img[:, stripes] = 0.6
        if i >= appear:
            half = int(round(2 + (i - appear + 1) * max(h, w) / (4 * f)))
            img[max(oy - half, 0):oy + half, max(ox - half, 0):ox + half] = 0.0
        img = img + gen.normal(0, cfg.pixel_noise, (h, w))
        frames[i] = np.clip(img, 0, 1)[None]
    return frames


def synth_sample(k, cfg):
    """Generate sample ``k``: its identity, signature flags and the three modalities."""
    session, label, index = sample_identity(k, cfg)
    danger = label == "dangerous"
    gen = RngStream(cfg.seed, k).generator()
    sig = {m: bool(danger and gen.random() < q)
           for m, q in (("A", cfg.q_audio), ("V", cfg.q_face), ("R", cfg.q_road))}
    audio = synth_audio(RngStream(cfg.seed, k).child(1).generator(), cfg, sig["A"])
    face, centers = synth_face(RngStream(cfg.seed, k).child(2).generator(), cfg, sig["V"])
    road = synth_road(RngStream(cfg.seed, k).child(3).generator(), cfg, sig["R"])
    return {"session": session, "label": label, "index": index, "signatures": sig,
            "audio": audio, "face": face, "road": road, "face_centers": centers}


def synth_generate(cfg, out_dir):
    """Write ``cfg.n_samples`` synthetic triples plus ``manifest.json``; returns the manifest."""
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for k in range(cfg.n_samples):
        s = synth_sample(k, cfg)
        paths = {
            "audio": format_filename(s["session"], s["label"], s["index"], "audio"),
            "face": format_filename(s["session"], s["label"], s["index"], "face"),
            "road": format_filename(s["session"], s["label"], s["index"], "road"),
        }
        try:
            write_wav(os.path.join(out_dir, paths["audio"]), s["audio"])
            tmf.save(os.path.join(out_dir, paths["face"]), s["face"])
            tmf.save(os.path.join(out_dir, paths["road"]), s["road"])
        except OSError as exc:
            raise OSError(f"{out_dir}: {exc}") from exc
        entries.append({"session": s["session"], "label": s["label"], "index": s["index"],
                        "paths": paths, "signatures": s["signatures"]})
    manifest = {"generator": "trimodal-synth/1", "config": asdict(cfg), "records": entries}
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest
