"""Run configuration: one JSON document holding every tunable, with named profiles."""
import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field

from .augment import AugmentConfig
from .dataset import SynthConfig
from .errors import ConfigError, InvalidArgument
from .model import ModelConfig
from .preprocess import PreprocessConfig
from .training import TrainConfig

PROFILES = ("desk", "canonical")

_DESK = {
    "dataset": {},
    "preprocess": {"sample_rate": 8000, "target_seconds": 1.2, "frame_count": 8,
                   "frame_height": 32, "frame_width": 32},
    "model": {"frame_channels": 1, "stem_channels": 8, "stem_kernel": 4, "stem_stride": 4,
              "block_channels": [16, 16], "block_strides": [2, 1], "stage2_channels": 32,
              "stage3_channels": 64, "audio_channels": [32, 64, 128, 64], "latent_dim": 32},
    "augment": {},
    "train": {},
}

_CANONICAL = {
    "dataset": {"n_samples": 40, "sample_rate": 22050, "clip_seconds": 3.6,
                "frame_height": 120, "frame_width": 160, "frame_channels": 3,
                "frames_per_clip": 90},
    "preprocess": {},
    "model": {},
    "augment": {},
    "train": {},
}

_SECTIONS = {
    "dataset": SynthConfig,
    "preprocess": PreprocessConfig,
    "model": ModelConfig,
    "augment": AugmentConfig,
    "train": TrainConfig,
}


def _plain(obj):
    """Dataclass -> JSON-ready dict (tuples become lists)."""
    return json.loads(json.dumps(asdict(obj)))


@dataclass
class RunConfig:
    profile: str = "desk"
    dataset: SynthConfig = field(default_factory=SynthConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    @classmethod
    def for_profile(cls, profile="desk"):
        return cls.from_dict({"profile": profile})

    @classmethod
    def from_dict(cls, doc):
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(doc) - set(_SECTIONS) - {"profile"}
        if unknown:
            raise ConfigError(f"unknown config key {sorted(unknown)[0]!r}")
        profile = doc.get("profile", "desk")
        if profile not in PROFILES:
            raise ConfigError(f"unknown config key value profile={profile!r}; use one of {PROFILES}")
        base = copy.deepcopy(_DESK if profile == "desk" else _CANONICAL)
        built = {}
        for name, kind in _SECTIONS.items():
            section = doc.get(name, {})
            if not isinstance(section, dict):
                raise ConfigError(f"config section {name!r} must be an object")
            merged = {**base[name], **section}
            try:
                built[name] = kind.from_dict(merged)
            except (InvalidArgument, TypeError) as exc:
                raise ConfigError(f"{name}: {exc}") from exc
        return cls(profile=profile, **built)

    @classmethod
    def load(cls, path):
        try:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: malformed JSON ({exc})") from exc
        return cls.from_dict(doc)

    def to_dict(self):
        out = {"profile": self.profile}
        for name in _SECTIONS:
            out[name] = _plain(getattr(self, name))
        return out

    def dumps(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def check_consistency(self):
        """Cross-section checks the individual sections cannot see."""
        if self.model.n_mfcc != self.preprocess.n_mfcc:
            raise ConfigError("model.n_mfcc must equal preprocess.n_mfcc")
        if self.model.frame_channels != self.dataset.frame_channels:
            raise ConfigError("model.frame_channels must equal dataset.frame_channels")
        return self
