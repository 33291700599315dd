"""Raw dataset directory -> model-ready tensors.

Output layout: ``<stem>.mfcc.tmf`` (``[n_mfcc, frames]``), ``<stem>.face.tmf``
and ``<stem>.road.tmf`` (``[count, C, H, W]``), ``manifest.json`` and a
tab-separated ``processing.log``.
"""
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tmf
from .audio import MfccConfig, mfcc, mel_filterbank, normalize_length, read_wav, target_length
from .dataset import SampleRecord, scan_dataset
from .errors import InvalidArgument
from .video import CENTER, FULL_FRAME, FrameStack, preprocess_video

REGIONS = {"center": CENTER, "full": FULL_FRAME}


@dataclass
class PreprocessConfig:
    sample_rate: int = 22050
    target_seconds: float = 3.6
    preemphasis: float = 0.97
    frame_ms: float = 25.0
    hop_ms: float = 10.0
    n_mels: int = 26
    n_mfcc: int = 13
    log_floor: float = 1e-10
    frame_count: int = 15
    frame_height: int = 224
    frame_width: int = 224
    face_region: str = "center"
    road_region: str = "full"

    def __post_init__(self):
        for name in ("face_region", "road_region"):
            if getattr(self, name) not in REGIONS:
                raise InvalidArgument(f"{name} must be one of {sorted(REGIONS)}")
        if self.frame_count < 1 or self.frame_height < 1 or self.frame_width < 1:
            raise InvalidArgument("frame count and size must be positive")
        self.mfcc_config()

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidArgument(f"unknown preprocess config key {sorted(unknown)[0]!r}")
        return cls(**d)

    def mfcc_config(self):
        return MfccConfig(self.sample_rate, self.preemphasis, self.frame_ms, self.hop_ms,
                          self.n_mels, self.n_mfcc, self.log_floor)

    @property
    def audio_frames(self):
        return self.mfcc_config().n_frames(target_length(self.target_seconds, self.sample_rate))


def _load_stack(path, source_id):
    if path.lower().endswith(".mp4"):
        raise InvalidArgument("compressed video is not decoded; supply TMF1 frame stacks")
    return FrameStack(tmf.load(path), source_id)


def preprocess_record(record, cfg, filterbank=None, log=None):
    """Return ``(mfcc, face, road)`` arrays for one record; raises on failure."""
    mcfg = cfg.mfcc_config()
    w = read_wav(record.paths["audio"])
    if w.sample_rate != cfg.sample_rate:
        raise InvalidArgument(f"audio at {w.sample_rate} Hz, expected {cfg.sample_rate} Hz")
    feats = mfcc(normalize_length(w, cfg.target_seconds), mcfg, filterbank)
    stacks = []
    for key, region in (("face", cfg.face_region), ("road", cfg.road_region)):
        source = os.path.basename(record.paths[key])
        stack = _load_stack(record.paths[key], source)
        stacks.append(preprocess_video(stack, REGIONS[region], cfg.frame_count,
                                       cfg.frame_height, cfg.frame_width, log=log).frames)
    return feats.astype(np.float32), stacks[0], stacks[1]


def _process(rec, cfg, fb):
    video_log = []
    try:
        return preprocess_record(rec, cfg, fb, video_log), video_log, None
    except Exception as exc:  # one bad file must not stop the batch
        return None, video_log, exc


def preprocess_dataset(in_dir, out_dir, cfg, workers=1):
    """Process every complete triple under ``in_dir``; failures are logged and skipped.

    Up to ``workers`` records are processed concurrently; outputs and log
    lines are still written in record order.  Returns ``(manifest, failures)``.
    """
    records, report = scan_dataset(in_dir)
    os.makedirs(out_dir, exist_ok=True)
    fb = mel_filterbank(cfg.mfcc_config())
    log = [f"incomplete\t{line.split(chr(9))[1]}\t{line.split(chr(9), 2)[-1]}"
           if line.startswith("incomplete") else line for line in report]
    done, failures = [], 0
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(lambda r: _process(r, cfg, fb), records))
    else:
        outcomes = (_process(r, cfg, fb) for r in records)
    for rec, (arrays, video_log, exc) in zip(records, outcomes):
        if exc is not None:
            failures += 1
            log.append(f"failed\t{rec.stem}\t{type(exc).__name__}: {exc}")
            continue
        feats, face, road = arrays
        log.extend(video_log)
        log.append(f"ok\t{os.path.basename(rec.paths['audio'])}\tmfcc {list(feats.shape)}")
        paths = {"audio": f"{rec.stem}.mfcc.tmf", "face": f"{rec.stem}.face.tmf",
                 "road": f"{rec.stem}.road.tmf"}
        tmf.save(os.path.join(out_dir, paths["audio"]), feats)
        tmf.save(os.path.join(out_dir, paths["face"]), face)
        tmf.save(os.path.join(out_dir, paths["road"]), road)
        done.append({"session": rec.session, "label": rec.label, "index": rec.index,
                     "paths": paths})
    manifest = {"format": "trimodal-preprocessed/1", "preprocess": asdict(cfg),
                "processed": len(done), "failed": failures, "records": done}
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out_dir, "processing.log"), "w", encoding="utf-8") as fh:
        fh.write("".join(line + "\n" for line in log))
    return manifest, failures


def load_preprocessed(directory):
    """Read a preprocessed directory into ``(records, arrays)``.

    ``arrays`` maps ``audio``/``face``/``road``/``label`` to stacked arrays in
    record order.
    """
    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != "trimodal-preprocessed/1":
        raise InvalidArgument(f"{directory} is not a preprocessed dataset")
    records, audio, face, road = [], [], [], []
    for e in manifest["records"]:
        rec = SampleRecord(e["session"], e["label"], e["index"],
                           {k: os.path.join(directory, v) for k, v in e["paths"].items()})
        records.append(rec)
        audio.append(tmf.load(rec.paths["audio"]))
        face.append(tmf.load(rec.paths["face"]))
        road.append(tmf.load(rec.paths["road"]))
    if not records:
        raise InvalidArgument(f"{directory} holds no preprocessed samples")
    arrays = {"audio": np.stack(audio), "face": np.stack(face), "road": np.stack(road),
              "label": np.array([r.label_id for r in records], dtype=np.int64)}
    return records, arrays
