"""Run configuration: model/training/streaming knobs, config files, seeds.

Config files are plain ``key = value`` lines with ``#`` comments. Every key
has a default, and the effective configuration of a run is echoed so any
run can be reproduced bit-for-bit from its echo plus the master seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
import json

import numpy as np

__all__ = [
    "ModelConfig",
    "LossWeights",
    "OptimConfig",
    "TrainConfig",
    "StreamConfig",
    "MelConfig",
    "CorpusConfig",
    "RunConfig",
    "ConfigError",
    "parse_config_text",
    "config_hash",
    "seed_streams",
]


class ConfigError(ValueError):
    """Invalid configuration value or malformed config file."""


@dataclass
class ModelConfig:
    """Network dimensions shared by teacher and student."""

    mel_bands: int = 80          # frequency bands per original frame
    reduction: int = 4           # consecutive frames stacked into one column
    context_dim: int = 64        # encoder output channels, split into keys/values
    n_classes: int = 4
    embed_dim: int = 16
    n_heads: int = 1
    kernel_size: int = 5
    dilations: tuple = (1, 3, 9, 27, 1, 3, 9, 27)
    noise_dim: int = 4
    lookback: int = 32           # self-attention history limit in streaming mode
    weight_norm: bool = False

    @property
    def feature_dim(self) -> int:
        return self.mel_bands * self.reduction

    def validate(self) -> None:
        if self.mel_bands < 1 or self.reduction < 1:
            raise ConfigError("mel_bands and reduction must be >= 1")
        if self.context_dim < 2 or self.context_dim % 2 != 0:
            raise ConfigError("context_dim must be even and >= 2")
        if self.n_classes < 1 or self.embed_dim < 1 or self.n_heads < 1:
            raise ConfigError("n_classes, embed_dim, n_heads must be >= 1")
        if self.kernel_size < 1 or any(d < 1 for d in self.dilations):
            raise ConfigError("kernel_size and dilations must be >= 1")
        if self.noise_dim < 0:
            raise ConfigError("noise_dim must be >= 0")
        if self.lookback < 1:
            raise ConfigError("lookback must be >= 1")


@dataclass
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 2000.0
    lambda3: float = 2000.0
    nu: float = 0.3
    rho: float = 0.3

    def validate(self) -> None:
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ConfigError("loss weights must be nonnegative")
        if self.nu <= 0 or self.rho <= 0:
            raise ConfigError("nu and rho must be positive")


@dataclass
class OptimConfig:
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class TrainConfig:
    batch_size: int = 16
    teacher_iters: int = 3000
    student_iters: int = 8000
    cache_teacher_attention: bool = False


@dataclass
class StreamConfig:
    window: int = 4              # chunk length S in stacked frames
    lookback: int = 32
    identity: bool = False
    timing: bool = False

    def validate(self) -> None:
        if self.window < 1 or self.lookback < 1:
            raise ConfigError("window and lookback must be >= 1")


@dataclass
class MelConfig:
    sample_rate: int = 16000
    n_bands: int = 80
    frame_ms: int = 64
    hop_ms: int = 8

    def validate(self) -> None:
        if not (self.frame_ms > self.hop_ms > 0):
            raise ConfigError("need frame_ms > hop_ms > 0")

    @property
    def frame_length(self) -> int:
        return self.sample_rate * self.frame_ms // 1000

    @property
    def hop_length(self) -> int:
        return self.sample_rate * self.hop_ms // 1000


@dataclass
class CorpusConfig:
    pairs_per_class_pair: int = 50
    len_min: int = 40
    len_max: int = 80
    latent_dim: int = 3


@dataclass
class RunConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    stream: StreamConfig = field(default_factory=StreamConfig)
    mel: MelConfig = field(default_factory=MelConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)

    def validate(self) -> None:
        self.model.validate()
        self.loss.validate()
        self.stream.validate()
        self.mel.validate()

    # flat key <-> nested dataclass plumbing ------------------------------

    _SECTIONS = ("model", "loss", "optim", "train", "stream", "mel", "corpus")

    def to_mapping(self) -> dict:
        out = {"seed": self.seed}
        for sec in self._SECTIONS:
            obj = getattr(self, sec)
            for f in fields(obj):
                key = f.name
                # model.lookback and stream.lookback are the same J knob;
                # the flat namespace keeps a single "lookback" key
                if sec == "model" and key == "lookback":
                    continue
                val = getattr(obj, key)
                if isinstance(val, tuple):
                    val = ",".join(str(v) for v in val)
                out[key] = val
        return out

    @classmethod
    def from_mapping(cls, mapping: dict) -> "RunConfig":
        cfg = cls()
        known = {}
        for sec in cls._SECTIONS:
            for f in fields(getattr(cfg, sec)):
                known[f.name] = (sec, f)
        updates = {sec: {} for sec in cls._SECTIONS}
        for key, raw in mapping.items():
            if key == "seed":
                cfg.seed = _coerce(raw, int, "seed")
                continue
            if key not in known:
                raise ConfigError(f"unknown config key: {key}")
            sec, f = known[key]
            updates[sec][f.name] = _coerce_field(raw, f)
            if key == "lookback":
                updates["model"]["lookback"] = updates[sec][f.name]
        for sec in cls._SECTIONS:
            if updates[sec]:
                setattr(cfg, sec, replace(getattr(cfg, sec), **updates[sec]))
        cfg.validate()
        return cfg

    def echo_lines(self):
        m = self.to_mapping()
        return [f"{k} = {_fmt(m[k])}" for k in sorted(m)]


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _coerce(raw, typ, name):
    if isinstance(raw, typ) and not (typ is int and isinstance(raw, bool)):
        return raw
    try:
        if typ is bool:
            s = str(raw).strip().lower()
            if s in ("true", "1", "yes", "on"):
                return True
            if s in ("false", "0", "no", "off"):
                return False
            raise ValueError(s)
        return typ(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc


def _coerce_field(raw, f):
    if f.type in ("tuple", tuple) or isinstance(f.default, tuple):
        if isinstance(raw, (tuple, list)):
            return tuple(int(v) for v in raw)
        return tuple(int(v) for v in str(raw).split(",") if v.strip())
    typ = type(f.default)
    return _coerce(raw, typ, f.name)


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines; '#' starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, val = line.split("=", 1)
        out[key.strip()] = val.strip()
    return out


def config_hash(model: ModelConfig) -> int:
    """64-bit FNV-1a over the canonical model-config JSON.

    Checkpoints embed this; loading under an incompatible model shape is
    rejected up front instead of failing deep inside a matmul.
    """
    payload = {f.name: getattr(model, f.name) for f in fields(model)}
    payload["dilations"] = list(payload["dilations"])
    blob = json.dumps(payload, sort_keys=True).encode()
    h = 0xCBF29CE484222325
    for byte in blob:
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def seed_streams(master_seed: int) -> dict:
    """Fan one master seed out into independent named generators.

    The split is deterministic, so logging the master seed alone is enough
    to reproduce corpus generation, parameter init, predictor noise, and
    batch shuffling.
    """
    ss = np.random.SeedSequence(master_seed)
    names = ("corpus", "init", "noise", "shuffle")
    children = ss.spawn(len(names))
    return {n: np.random.Generator(np.random.PCG64(c)) for n, c in zip(names, children)}


def subseed(master_seed: int, index: int) -> int:
    """Plain-integer sub-seed for APIs that take a seed rather than a generator."""
    child = np.random.SeedSequence(master_seed).spawn(index + 1)[index]
    return int(child.generate_state(1, np.uint64)[0])
