"""Configuration dataclasses, named presets, and the flat ``key = value`` file format."""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .data import CorpusSpec
from .errors import ConfigError

PRESETS = ("desk", "paper")


@dataclass
class VQConfig:
    dim: int = 16
    d_latent: int = 32
    codebook_size: int = 64
    levels: int = 6
    hidden: int = 64
    blocks: int = 3
    kernel: int = 3
    dropout: float = 0.2
    ema_decay: float = 0.99
    dead_threshold: float = 1.0
    reset_patience: int = 256
    learnable_affine: bool = True
    eps_inv: float = 1e-4

    def validate(self) -> None:
        if self.codebook_size < 2:
            raise ConfigError("codebook_size must be >= 2")
        if self.codebook_size > 65535:
            raise ConfigError("codebook_size must fit the 16-bit token format")
        if self.levels < 1:
            raise ConfigError("levels must be >= 1")
        if self.kernel % 2 != 1:
            raise ConfigError("kernel must be odd (stride-1 same padding)")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError("ema_decay must lie in [0, 1)")


@dataclass
class TransformerConfig:
    codebook_size: int = 64
    levels: int = 6
    d_model: int = 128
    heads: tuple[int, ...] = (4, 4, 2, 2, 2, 2)
    layers: tuple[int, ...] = (3, 3, 2, 1, 1, 1)
    ff_mult: int = 4
    dropout: float = 0.1
    max_relative: int = 512

    @classmethod
    def preset(cls, name: str, **overrides) -> "TransformerConfig":
        if name == "desk":
            base = cls()
        elif name == "paper":
            base = cls(codebook_size=8192, d_model=1024, heads=(16, 12, 6, 2, 2, 2),
                       layers=(18, 16, 8, 4, 2, 2), dropout=0.2)
        else:
            raise ConfigError(f"unknown preset {name!r}; choose from {PRESETS}")
        return dataclasses.replace(base, **overrides)

    def validate(self) -> None:
        if len(self.heads) != self.levels or len(self.layers) != self.levels:
            raise ConfigError(f"heads/layers need {self.levels} entries, got {len(self.heads)}/{len(self.layers)}")
        if any(h < 1 or h > self.d_model for h in self.heads):
            raise ConfigError("every head count must lie in [1, d_model]")
        if any(n < 1 for n in self.layers):
            raise ConfigError("every level needs at least one layer")
        if self.max_relative < 1:
            raise ConfigError("max_relative must be >= 1")


@dataclass
class TrainConfig:
    stage: str = "vq"
    steps: int = 2000
    batch: int = 64
    window: int = 64
    lr_start: float = 1e-3
    lr_end: float = 1e-4
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    beta: float = 0.02
    gamma: float = 1e-4
    lam: float = 0.1
    grad_clip: float = 0.0
    seed: int = 0
    log_every: int = 50
    eval_every: int = 500
    ckpt_every: int = 0

    def validate(self) -> None:
        if self.stage not in ("vq", "rqhc"):
            raise ConfigError(f"unknown stage {self.stage!r}")
        if not self.lr_start >= self.lr_end > 0:
            raise ConfigError("need lr_start >= lr_end > 0")
        if self.steps < 1 or self.batch < 1 or self.window < 1:
            raise ConfigError("steps, batch and window must be >= 1")


@dataclass
class SamplerConfig:
    temperature: float = 1.0
    top_k: int = 16
    seed: int = 0
    window: int = 256
    max_len: int = 196
    ignore_eos: bool = False
    refresh_condition: bool = True

    def validate(self, num_classes: int | None = None) -> None:
        if not 0.0 <= self.temperature <= 10.0:
            raise ConfigError("temperature must lie in [0, 10] (0 means argmax)")
        if self.top_k < 1 or (num_classes is not None and self.top_k > num_classes):
            raise ConfigError(f"top_k must lie in [1, {num_classes or 'K+1'}]")
        if self.window < 1:
            raise ConfigError("window must be >= 1")


@dataclass
class TcaConfig:
    mode: str = "scheduled"
    segment_len: int = 40
    k_max: int = 5
    llm_url: str = ""
    embed_url: str = ""
    timeout: float = 30.0


def _default_train_vq() -> TrainConfig:
    return TrainConfig(stage="vq", steps=2000, batch=64, window=64, lr_start=1e-3, lr_end=1e-4)


def _default_train_rqhc() -> TrainConfig:
    return TrainConfig(stage="rqhc", steps=5000, batch=32, window=64, lr_start=5e-4, lr_end=5e-5,
                       weight_decay=0.01, grad_clip=1.0)


@dataclass
class RunConfig:
    preset: str = "desk"
    corpus: CorpusSpec = field(default_factory=CorpusSpec.default)
    vq: VQConfig = field(default_factory=VQConfig)
    rqhc: TransformerConfig = field(default_factory=TransformerConfig)
    train_vq: TrainConfig = field(default_factory=_default_train_vq)
    train_rqhc: TrainConfig = field(default_factory=_default_train_rqhc)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    tca: TcaConfig = field(default_factory=TcaConfig)

    @classmethod
    def from_preset(cls, name: str) -> "RunConfig":
        if name == "desk":
            return cls()
        if name == "paper":
            return cls(
                preset="paper",
                vq=VQConfig(d_latent=128, codebook_size=8192, levels=6, hidden=512),
                rqhc=TransformerConfig.preset("paper"),
                train_vq=TrainConfig(stage="vq", steps=2000, batch=512, lr_start=2e-4, lr_end=2e-4),
                train_rqhc=TrainConfig(stage="rqhc", steps=1500, batch=32, lr_start=2.5e-5, lr_end=3e-6,
                                       weight_decay=0.01, grad_clip=1.0),
            )
        raise ConfigError(f"unknown preset {name!r}; choose from {PRESETS}")

    def validate(self) -> None:
        self.vq.validate()
        self.rqhc.validate()
        self.train_vq.validate()
        self.train_rqhc.validate()
        self.sampler.validate(self.rqhc.codebook_size + 1)
        if self.rqhc.codebook_size != self.vq.codebook_size or self.rqhc.levels != self.vq.levels:
            raise ConfigError("transformer codebook_size/levels must match the quantizer")

    def to_text(self) -> str:
        out = [f"[run]\npreset = {self.preset}\n"]
        for section, obj in self._sections():
            out.append(f"[{section}]")
            for f in dataclasses.fields(obj):
                out.append(f"{f.name} = {_format(getattr(obj, f.name))}")
            out.append("")
        corpus = self.corpus.to_text()
        return "\n".join(out) + "\n" + corpus

    def _sections(self):
        return [
            ("vq", self.vq), ("rqhc", self.rqhc), ("train.vq", self.train_vq),
            ("train.rqhc", self.train_rqhc), ("sampler", self.sampler), ("tca", self.tca),
        ]

    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(str(v) for v in value)
    return str(value)


def _parse(raw: str, typ):
    origin = typing.get_origin(typ)
    if typ is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if origin is tuple:
        (inner, *_) = typing.get_args(typ)
        return tuple(inner(x.strip()) for x in raw.split(",") if x.strip())
    return typ(raw.strip())


def apply_section(obj, section: typing.Mapping[str, str], name: str = "") -> None:
    hints = typing.get_type_hints(type(obj))
    known = {f.name for f in dataclasses.fields(obj)}
    for key, raw in section.items():
        if key not in known:
            raise ConfigError(f"unknown key {key!r} in section [{name}]")
        try:
            setattr(obj, key, _parse(raw, hints[key]))
        except ValueError as exc:
            raise ConfigError(f"[{name}] {key}: {exc}") from exc


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    preset = cp.get("run", "preset", fallback="desk")
    cfg = RunConfig.from_preset(preset)
    if cp.has_section("rqhc") and "preset" in cp["rqhc"]:
        cfg.rqhc = TransformerConfig.preset(cp["rqhc"]["preset"])
    for name, obj in cfg._sections():
        if cp.has_section(name):
            items = {k: v for k, v in cp[name].items() if not (name == "rqhc" and k == "preset")}
            apply_section(obj, items, name)
    if cp.has_section("corpus") or any(s.startswith("archetype.") for s in cp.sections()):
        cfg.corpus = CorpusSpec.from_parser(cp)
    explicit = cp["rqhc"] if cp.has_section("rqhc") else {}
    for key in ("codebook_size", "levels"):
        if key not in explicit:
            setattr(cfg.rqhc, key, getattr(cfg.vq, key))
    cfg.validate()
    return cfg


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        cfg = RunConfig()
        cfg.validate()
        return cfg
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)
