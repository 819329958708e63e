"""Motion sequences: synthetic corpus, on-disk format, normalization, batching."""
from __future__ import annotations

import configparser
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np
import torch

from .errors import ConfigError, DimensionError, ExhaustionError, ValidationError

FEATURES = (
    "root_x", "root_y", "root_z", "heading",
    "spine", "neck",
    "l_shoulder", "r_shoulder", "l_elbow", "r_elbow",
    "l_hip", "r_hip", "l_knee", "r_knee", "l_ankle", "r_ankle",
)
F = {name: i for i, name in enumerate(FEATURES)}
STD_FLOOR = 1e-6
SEQ_SUFFIX = ".mot"
_HEADER = struct.Struct("<IIf")  # T, d, fps


@dataclass
class MotionSequence:
    frames: np.ndarray  # (T, d) float32
    fps: float = 20.0
    caption: str = ""

    def __post_init__(self) -> None:
        self.frames = np.ascontiguousarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValidationError(f"frames must be (T>=1, d), got {self.frames.shape}")
        if not np.isfinite(self.frames).all():
            raise ValidationError("motion frames contain non-finite values")

    @property
    def length(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self) -> None:
        self.mean = np.asarray(self.mean, dtype=np.float32)
        self.std = np.maximum(np.asarray(self.std, dtype=np.float32), np.float32(STD_FLOOR))

    @classmethod
    def identity(cls, dim: int) -> "NormStats":
        return cls(np.zeros(dim, np.float32), np.ones(dim, np.float32))

    @classmethod
    def fit(cls, sequences: list[MotionSequence]) -> "NormStats":
        if not sequences:
            raise ValidationError("cannot fit normalization stats on an empty split")
        allf = np.concatenate([s.frames for s in sequences], axis=0).astype(np.float64)
        return cls(allf.mean(axis=0), allf.std(axis=0))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass
class Dataset:
    train: list[MotionSequence]
    eval: list[MotionSequence] = field(default_factory=list)
    stats: NormStats | None = None

    def __post_init__(self) -> None:
        dims = {s.dim for s in self.train + self.eval}
        if len(dims) > 1:
            raise DimensionError(f"mixed feature dims in dataset: {sorted(dims)}")
        if self.stats is None and self.train:
            self.stats = NormStats.fit(self.train)

    @property
    def sequences(self) -> list[MotionSequence]:
        return self.train

    @property
    def dim(self) -> int:
        return (self.train or self.eval)[0].dim

    def split(self, name: str) -> list[MotionSequence]:
        if name not in ("train", "eval"):
            raise ValidationError(f"unknown split {name!r}")
        return self.train if name == "train" else self.eval


# --- normalization --------------------------------------------------------


def normalize(seq: MotionSequence, stats: NormStats) -> MotionSequence:
    if seq.dim != stats.dim:
        raise DimensionError(f"stats have d={stats.dim}, sequence has d={seq.dim}")
    return MotionSequence((seq.frames - stats.mean) / stats.std, seq.fps, seq.caption)


def denormalize(seq: MotionSequence, stats: NormStats) -> MotionSequence:
    if seq.dim != stats.dim:
        raise DimensionError(f"stats have d={stats.dim}, sequence has d={seq.dim}")
    return MotionSequence(seq.frames * stats.std + stats.mean, seq.fps, seq.caption)


# --- synthetic corpus -----------------------------------------------------


@dataclass
class CorpusSpec:
    """Generator configuration. ``archetypes`` maps name -> {param: (lo, hi)}."""

    archetypes: dict[str, dict[str, tuple[float, float]]]
    train_count: int = 1000
    eval_count: int = 100
    min_frames: int = 64
    max_frames: int = 240
    fps: float = 20.0
    noise: float = 0.01
    seed: int = 0

    @classmethod
    def default(cls, **overrides) -> "CorpusSpec":
        return cls(archetypes={k: dict(v) for k, v in DEFAULT_RANGES.items()}, **overrides)

    @classmethod
    def from_file(cls, path: str | Path) -> "CorpusSpec":
        cp = configparser.ConfigParser()
        if not cp.read(path):
            raise ConfigError(f"cannot read corpus spec {path}")
        return cls.from_parser(cp)

    @classmethod
    def from_parser(cls, cp: configparser.ConfigParser) -> "CorpusSpec":
        try:
            sec = cp["corpus"] if cp.has_section("corpus") else {}
            kw = dict(
                train_count=int(sec.get("train_count", 1000)),
                eval_count=int(sec.get("eval_count", 100)),
                min_frames=int(sec.get("min_frames", 64)),
                max_frames=int(sec.get("max_frames", 240)),
                fps=float(sec.get("fps", 20.0)),
                noise=float(sec.get("noise", 0.01)),
                seed=int(sec.get("seed", 0)),
            )
            archetypes = {}
            for name in cp.sections():
                if not name.startswith("archetype."):
                    continue
                arch = name.split(".", 1)[1]
                ranges = {}
                for key, raw in cp[name].items():
                    parts = [float(x) for x in raw.split(",")]
                    ranges[key] = (parts[0], parts[-1])
                archetypes[arch] = ranges
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"malformed corpus spec: {exc}") from exc
        if not archetypes:
            archetypes = {k: dict(v) for k, v in DEFAULT_RANGES.items()}
        return cls(archetypes=archetypes, **kw)

    def to_text(self) -> str:
        lines = ["[corpus]"]
        for key in ("train_count", "eval_count", "min_frames", "max_frames", "fps", "noise", "seed"):
            lines.append(f"{key} = {getattr(self, key)}")
        for arch, ranges in self.archetypes.items():
            lines.append("")
            lines.append(f"[archetype.{arch}]")
            for key, (lo, hi) in ranges.items():
                lines.append(f"{key} = {lo:g}, {hi:g}")
        return "\n".join(lines) + "\n"


DEFAULT_RANGES: dict[str, dict[str, tuple[float, float]]] = {
    "walk_circle": {"amplitude": (1.0, 1.0), "radius": (0.5, 2.0), "laps": (1, 2), "cadence": (1.2, 2.2)},
    "jump": {"amplitude": (1.0, 1.0), "height": (0.2, 0.6), "count": (1, 4)},
    "wave": {"amplitude": (1.0, 1.0), "side": (0, 1), "frequency": (0.8, 2.0)},
    "spin": {"amplitude": (1.0, 1.0), "turns": (1, 3), "direction": (0, 1)},
    "squat": {"amplitude": (1.0, 1.0), "depth": (0.2, 0.5), "count": (1, 4)},
}
_INTEGER_PARAMS = {"laps", "count", "side", "turns", "direction"}


def _base_pose(T: int) -> np.ndarray:
    pose = np.zeros((T, len(FEATURES)), np.float64)
    pose[:, F["root_y"]] = 0.9
    pose[:, F["l_elbow"]] = pose[:, F["r_elbow"]] = 0.15
    return pose


def _walk_circle(T, fps, p):
    frac = np.arange(T) / max(T - 1, 1)
    t = np.arange(T) / fps
    theta = 2 * np.pi * p["laps"] * frac
    r = p["radius"]
    out = np.zeros((T, len(FEATURES)))
    out[:, F["root_x"]] = r * np.sin(theta)
    out[:, F["root_z"]] = r * (1 - np.cos(theta))
    out[:, F["heading"]] = theta
    gait = 2 * np.pi * p["cadence"] * t
    out[:, F["root_y"]] = 0.03 * np.abs(np.sin(gait))
    out[:, F["l_hip"]] = 0.45 * np.sin(gait)
    out[:, F["r_hip"]] = -0.45 * np.sin(gait)
    out[:, F["l_knee"]] = 0.6 * np.maximum(0, np.sin(gait))
    out[:, F["r_knee"]] = 0.6 * np.maximum(0, -np.sin(gait))
    out[:, F["l_shoulder"]] = -0.3 * np.sin(gait)
    out[:, F["r_shoulder"]] = 0.3 * np.sin(gait)
    out[:, F["spine"]] = 0.05
    return out, f"a person walks in a circle of radius {r:.1f} meters {_times(p['laps'], 'lap')}"


def _jump(T, fps, p):
    count = p["count"]
    phase = (np.arange(T) / T) * count % 1.0
    air = (phase > 0.35) & (phase < 0.75)
    lift = np.where(air, np.sin(np.pi * (phase - 0.35) / 0.4), 0.0)
    crouch = np.where((phase > 0.15) & (phase <= 0.35), np.sin(np.pi * (phase - 0.15) / 0.2), 0.0)
    out = np.zeros((T, len(FEATURES)))
    out[:, F["root_y"]] = p["height"] * lift - 0.15 * crouch
    for j in ("l_knee", "r_knee"):
        out[:, F[j]] = 1.0 * crouch + 0.3 * lift
    for j in ("l_hip", "r_hip"):
        out[:, F[j]] = 0.7 * crouch
    for j in ("l_shoulder", "r_shoulder"):
        out[:, F[j]] = 1.2 * lift - 0.4 * crouch
    out[:, F["spine"]] = 0.3 * crouch
    return out, f"a person jumps up {_times(count, 'time')}"


def _wave(T, fps, p):
    side = "l" if p["side"] == 0 else "r"
    t = np.arange(T) / fps
    frac = np.arange(T) / max(T - 1, 1)
    raise_ = np.clip(frac / 0.2, 0, 1) * np.clip((1 - frac) / 0.2, 0, 1)
    out = np.zeros((T, len(FEATURES)))
    out[:, F[f"{side}_shoulder"]] = 1.5 * raise_
    out[:, F[f"{side}_elbow"]] = raise_ * (0.6 + 0.5 * np.sin(2 * np.pi * p["frequency"] * t))
    out[:, F["neck"]] = 0.1 * raise_
    hand = "left" if side == "l" else "right"
    return out, f"a person waves the {hand} hand"


def _spin(T, fps, p):
    frac = np.arange(T) / max(T - 1, 1)
    sign = 1.0 if p["direction"] == 0 else -1.0
    ease = 0.5 - 0.5 * np.cos(np.pi * frac)
    out = np.zeros((T, len(FEATURES)))
    out[:, F["heading"]] = sign * 2 * np.pi * p["turns"] * ease
    spread = np.sin(np.pi * frac)
    out[:, F["l_shoulder"]] = out[:, F["r_shoulder"]] = 0.8 * spread
    out[:, F["l_ankle"]] = 0.2 * np.abs(np.sin(2 * np.pi * p["turns"] * 2 * frac))
    way = "clockwise" if sign > 0 else "counterclockwise"
    return out, f"a person spins {way} {_times(p['turns'], 'turn')}"


def _squat(T, fps, p):
    count = p["count"]
    phase = (np.arange(T) / T) * count % 1.0
    bend = 0.5 - 0.5 * np.cos(2 * np.pi * phase)
    out = np.zeros((T, len(FEATURES)))
    out[:, F["root_y"]] = -p["depth"] * bend
    for j in ("l_knee", "r_knee"):
        out[:, F[j]] = 2.0 * p["depth"] * 2 * bend
    for j in ("l_hip", "r_hip"):
        out[:, F[j]] = 1.5 * p["depth"] * 2 * bend
    for j in ("l_ankle", "r_ankle"):
        out[:, F[j]] = -0.5 * bend
    out[:, F["l_shoulder"]] = out[:, F["r_shoulder"]] = 0.9 * bend
    out[:, F["spine"]] = 0.4 * bend
    return out, f"a person squats down {_times(count, 'time')}"


def _times(n, unit: str) -> str:
    n = int(n)
    return f"{n} {unit}" if n == 1 else f"{n} {unit}s"


ARCHETYPES = {
    "walk_circle": _walk_circle,
    "jump": _jump,
    "wave": _wave,
    "spin": _spin,
    "squat": _squat,
}


def render_archetype(
    name: str, params: dict[str, float], frames: int, fps: float = 20.0
) -> MotionSequence:
    """Noise-free rendering of one archetype; ``params['amplitude']`` scales all motion."""
    if name not in ARCHETYPES:
        raise ConfigError(f"unknown archetype {name!r}; known: {sorted(ARCHETYPES)}")
    p = {k: (int(round(v)) if k in _INTEGER_PARAMS else float(v)) for k, v in params.items()}
    for key, (lo, _) in DEFAULT_RANGES[name].items():
        p.setdefault(key, int(lo) if key in _INTEGER_PARAMS else float(lo))
    motion, caption = ARCHETYPES[name](frames, fps, p)
    frames_arr = _base_pose(frames) + p["amplitude"] * motion
    return MotionSequence(frames_arr.astype(np.float32), fps, caption)


def synthesize_corpus(spec: CorpusSpec, seed: int | None = None) -> Dataset:
    """Deterministic synthetic corpus; ``seed`` overrides ``spec.seed``."""
    if not spec.archetypes:
        raise ConfigError("corpus spec names no archetypes")
    unknown = set(spec.archetypes) - set(ARCHETYPES)
    if unknown:
        raise ConfigError(f"unknown archetypes: {sorted(unknown)}")
    if not 1 <= spec.min_frames <= spec.max_frames:
        raise ConfigError("need 1 <= min_frames <= max_frames")
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    names = sorted(spec.archetypes)

    def draw() -> MotionSequence:
        name = names[int(rng.integers(len(names)))]
        T = int(rng.integers(spec.min_frames, spec.max_frames + 1))
        params = {}
        for key, (lo, hi) in sorted(spec.archetypes[name].items()):
            if key in _INTEGER_PARAMS:
                params[key] = int(rng.integers(int(lo), int(hi) + 1))
            else:
                params[key] = float(rng.uniform(lo, hi))
        seq = render_archetype(name, params, T, spec.fps)
        amp = params.get("amplitude", 1.0)
        noise = rng.standard_normal(seq.frames.shape) * spec.noise * amp
        return MotionSequence(seq.frames + noise.astype(np.float32), spec.fps, seq.caption)

    train = [draw() for _ in range(spec.train_count)]
    evals = [draw() for _ in range(spec.eval_count)]
    return Dataset(train, evals)


# --- file formats ---------------------------------------------------------


def write_sequence(path: str | Path, seq: MotionSequence) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(seq.length, seq.dim, float(seq.fps)))
        fh.write(seq.frames.astype("<f4").tobytes(order="C"))


def read_sequence(path: str | Path, caption: str = "") -> MotionSequence:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValidationError(f"{path}: truncated header")
    T, d, fps = _HEADER.unpack_from(raw)
    body = raw[_HEADER.size:]
    if len(body) != T * d * 4:
        raise ValidationError(f"{path}: expected {T * d * 4} payload bytes, found {len(body)}")
    frames = np.frombuffer(body, dtype="<f4").reshape(T, d).astype(np.float32)
    return MotionSequence(frames, fps, caption)


def save_corpus(ds: Dataset, out_dir: str | Path) -> None:
    out = Path(out_dir)
    for split in ("train", "eval"):
        for i, seq in enumerate(ds.split(split)):
            name = f"{split}_{i:05d}"
            write_sequence(out / split / f"{name}{SEQ_SUFFIX}", seq)
            cap = out / "captions" / f"{name}.txt"
            cap.parent.mkdir(parents=True, exist_ok=True)
            cap.write_text(seq.caption + "\n", encoding="utf-8")


def load_corpus(root: str | Path) -> Dataset:
    root = Path(root)
    if not (root / "train").is_dir():
        raise ValidationError(f"{root} has no train/ directory")
    splits = {}
    for split in ("train", "eval"):
        seqs = []
        for f in sorted((root / split).glob(f"*{SEQ_SUFFIX}")):
            cap_file = root / "captions" / f"{f.stem}.txt"
            cap = cap_file.read_text(encoding="utf-8").strip() if cap_file.exists() else ""
            seqs.append(read_sequence(f, cap))
        splits[split] = seqs
    if not splits["train"]:
        raise ValidationError(f"{root}/train contains no {SEQ_SUFFIX} files")
    return Dataset(splits["train"], splits["eval"])


# --- batching -------------------------------------------------------------


class Batch(NamedTuple):
    motion: torch.Tensor  # (B, W, d) normalized
    mask: torch.Tensor  # (B, W) bool, False on padding
    captions: list[str]


def batch_iter(
    ds: Dataset,
    batch: int,
    window: int | None,
    seed: int,
    *,
    split: str = "train",
    pad: bool = False,
    drop_last: bool = True,
    start_step: int = 0,
    epochs: int | None = None,
) -> Iterator[Batch]:
    """Stream shuffled batches of random contiguous windows.

    Epoch ``e`` draws its permutation and window offsets from a generator seeded
    with ``(seed, e)``, so ``start_step`` can skip ahead without replaying data.
    ``window=None`` takes whole sequences (padded to the batch maximum).
    """
    seqs = ds.split(split)
    if not seqs:
        raise ValidationError(f"split {split!r} is empty")
    n = len(seqs)
    if batch < 1:
        raise ValidationError("batch must be >= 1")
    if batch > n and drop_last:
        raise ExhaustionError(f"batch {batch} exceeds {n} sequences with drop_last")
    if window is not None:
        if window < 1:
            raise ValidationError("window must be >= 1")
        shortest = min(s.length for s in seqs)
        if window > shortest and not pad:
            raise ValidationError(f"window {window} exceeds shortest sequence ({shortest}); enable padding")
    per_epoch = n // batch if drop_last else -(-n // batch)
    stats = ds.stats
    epoch, offset = divmod(start_step, per_epoch)
    while epochs is None or epoch < epochs:
        rng = np.random.default_rng([seed, epoch])
        perm = rng.permutation(n)
        starts = [
            int(rng.integers(0, seqs[i].length - window + 1))
            if window is not None and seqs[i].length > window else 0
            for i in perm
        ]
        for b in range(offset, per_epoch):
            idx = perm[b * batch:(b + 1) * batch]
            st = starts[b * batch:(b + 1) * batch]
            yield _assemble([seqs[i] for i in idx], st, window, stats)
        offset = 0
        epoch += 1


def _assemble(seqs, starts, window, stats: NormStats) -> Batch:
    width = window if window is not None else max(s.length for s in seqs)
    d = seqs[0].dim
    motion = np.zeros((len(seqs), width, d), np.float32)
    mask = np.zeros((len(seqs), width), bool)
    for row, (seq, st) in enumerate(zip(seqs, starts)):
        clip = seq.frames[st:st + width]
        motion[row, :len(clip)] = (clip - stats.mean) / stats.std
        mask[row, :len(clip)] = True
    return Batch(torch.from_numpy(motion), torch.from_numpy(mask), [s.caption for s in seqs])
