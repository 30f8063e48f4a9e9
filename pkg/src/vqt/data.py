"""Clip files, dataset manifests and the synthetic distortion generator.

Clip file layout (little-endian): b"VQTC", u32 version, u32 T, H, W, C, then
T*H*W*C float32 pixels in [0, 1], frame-major, row-major, channel-last.

Manifest: one tab-separated record per line,
``path  label  split  kind,severity,onset,duration;...`` with the path
relative to the manifest's directory and an empty last field for clean clips.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter1d

CLIP_MAGIC = b"VQTC"
CLIP_VERSION = 1
_HEADER = struct.Struct("<4sIIIII")
KINDS = ("blur", "blocking", "overexposure")


class FormatError(ValueError):
    """Malformed clip, manifest or checkpoint file."""


class BadMagicError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class PixelRangeError(FormatError):
    pass


@dataclass
class RawClip:
    frames: np.ndarray  # (T, H, W, 3) float32 in [0, 1]
    frame_rate: float | None = None

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.frames.shape


@dataclass(frozen=True)
class DistortionSpec:
    kind: str
    severity: float
    onset: int
    duration: int

    def frames(self) -> range:
        return range(self.onset, self.onset + self.duration)

    def overlaps(self, other: "DistortionSpec") -> bool:
        return self.onset < other.onset + other.duration and other.onset < self.onset + self.duration

    def encode(self) -> str:
        return f"{self.kind},{self.severity!r},{self.onset},{self.duration}"

    @classmethod
    def decode(cls, text: str) -> "DistortionSpec":
        kind, sev, onset, dur = text.split(",")
        return cls(kind, float(sev), int(onset), int(dur))


@dataclass
class ManifestEntry:
    path: str
    label: float
    split: str
    specs: list[DistortionSpec] = field(default_factory=list)


@dataclass
class Manifest:
    entries: list[ManifestEntry]
    root: Path = Path(".")

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def resolve(self, entry: ManifestEntry) -> Path:
        return self.root / entry.path


# ---------------------------------------------------------------- clip I/O


def _atomic_write(path: Path, payload: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_clip(path: str | Path, clip: RawClip | np.ndarray) -> None:
    frames = clip.frames if isinstance(clip, RawClip) else clip
    frames = np.asarray(frames, dtype="<f4")
    if frames.ndim != 4 or frames.shape[-1] != 3:
        raise FormatError(f"clip must be (T, H, W, 3), got {frames.shape}")
    T, H, W, C = frames.shape
    header = _HEADER.pack(CLIP_MAGIC, CLIP_VERSION, T, H, W, C)
    _atomic_write(Path(path), header + frames.tobytes(order="C"))


def load_clip(path: str | Path) -> RawClip:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != CLIP_MAGIC:
        raise BadMagicError(f"{path}: not a clip file (bad magic)")
    if len(raw) < _HEADER.size:
        raise TruncatedFileError(f"{path}: header truncated")
    _, version, T, H, W, C = _HEADER.unpack_from(raw)
    if version != CLIP_VERSION:
        raise FormatError(f"{path}: unsupported clip version {version}")
    if C != 3:
        raise FormatError(f"{path}: expected 3 channels, got {C}")
    expected = _HEADER.size + 4 * T * H * W * C
    if len(raw) != expected:
        raise TruncatedFileError(f"{path}: payload is {len(raw)} bytes, header implies {expected}")
    frames = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(T, H, W, C)
    bad = np.flatnonzero(~((frames >= 0.0) & (frames <= 1.0)))
    if bad.size:
        idx = np.unravel_index(bad[0], frames.shape)
        raise PixelRangeError(f"{path}: pixel {tuple(int(i) for i in idx)} = "
                              f"{frames[idx]!r} outside [0, 1]")
    return RawClip(frames.astype(np.float32))


# ----------------------------------------------------------------- manifest


def write_manifest(path: str | Path, entries: list[ManifestEntry]) -> None:
    lines = []
    for e in entries:
        specs = ";".join(s.encode() for s in e.specs)
        lines.append(f"{e.path}\t{e.label!r}\t{e.split}\t{specs}\n")
    _atomic_write(Path(path), "".join(lines).encode())


def read_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    entries = []
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise FormatError(f"{path}:{n}: expected 4 tab-separated fields")
        clip, label, split, specs = parts
        try:
            value = float(label)
            decoded = [DistortionSpec.decode(s) for s in specs.split(";") if s]
        except ValueError as exc:
            raise FormatError(f"{path}:{n}: {exc}") from None
        if not np.isfinite(value):
            raise FormatError(f"{path}:{n}: non-finite label")
        if split not in ("train", "test"):
            raise FormatError(f"{path}:{n}: unknown split {split!r}")
        entries.append(ManifestEntry(clip, value, split, decoded))
    train = {e.path for e in entries if e.split == "train"}
    clash = train & {e.path for e in entries if e.split == "test"}
    if clash:
        raise FormatError(f"{path}: clips in both splits: {sorted(clash)[:3]}")
    return Manifest(entries, path.parent)


# ---------------------------------------------------------------- generator


def synthetic_label(specs: list[DistortionSpec], T: int) -> float:
    """5 - 4 * clamp(sum(severity * duration) / T, 0, 1)."""
    mass = sum(s.severity * s.duration for s in specs) / T
    return 5.0 - 4.0 * min(max(mass, 0.0), 1.0)


def base_video(T: int, H: int, W: int, rng: np.random.Generator) -> np.ndarray:
    """Drifting low-frequency gradients plus a fixed seeded texture."""
    yy, xx = np.meshgrid(np.arange(H) / H, np.arange(W) / W, indexing="ij")
    freq = rng.uniform(0.5, 2.0, size=(3, 2))
    phase = rng.uniform(0, 2 * np.pi, size=3)
    speed = rng.uniform(0.5, 2.0, size=2) * rng.choice([-1, 1], size=2)
    texture = rng.normal(size=(H, W, 3))
    texture = gaussian_filter1d(gaussian_filter1d(texture, 0.7, axis=0), 0.7, axis=1)
    texture /= max(np.abs(texture).max(), 1e-12)
    frames = np.empty((T, H, W, 3))
    for t in range(T):
        dx, dy = speed * t / T
        for c in range(3):
            frames[t, :, :, c] = 0.5 + 0.25 * np.sin(
                2 * np.pi * (freq[c, 0] * (xx + dx) + freq[c, 1] * (yy + dy)) + phase[c])
    frames += 0.18 * texture[None]
    return np.clip(frames, 0.02, 0.95)


def _blur(frame: np.ndarray, severity: float) -> np.ndarray:
    sigma = 2.5 * severity
    out = gaussian_filter1d(frame, sigma, axis=0, mode="nearest")
    return gaussian_filter1d(out, sigma, axis=1, mode="nearest")


def _blocking(frame: np.ndarray, severity: float, block: int = 8) -> np.ndarray:
    H, W, C = frame.shape
    bh, bw = -(-H // block), -(-W // block)
    pad = np.pad(frame, ((0, bh * block - H), (0, bw * block - W), (0, 0)), mode="edge")
    tiles = pad.reshape(bh, block, bw, block, C)
    means = tiles.mean(axis=(1, 3), keepdims=True)
    step = 0.02 + 0.3 * severity
    means = np.round(means / step) * step
    mixed = (1 - severity) * tiles + severity * means
    return np.clip(mixed.reshape(bh * block, bw * block, C)[:H, :W], 0.0, 1.0)


def _overexpose(frame: np.ndarray, severity: float) -> np.ndarray:
    return np.clip(frame * (1 + 1.5 * severity) + 0.35 * severity, 0.0, 1.0)


_APPLY = {"blur": _blur, "blocking": _blocking, "overexposure": _overexpose}


def apply_distortions(frames: np.ndarray, specs: list[DistortionSpec]) -> np.ndarray:
    out = frames.copy()
    for s in specs:
        for t in s.frames():
            out[t] = _APPLY[s.kind](frames[t], s.severity)
    return out


def random_specs(T: int, rng: np.random.Generator, max_specs: int = 3,
                 max_tries: int = 100) -> list[DistortionSpec]:
    """0..max_specs non-overlapping segments; overlapping draws are redrawn."""
    count = int(rng.integers(0, max_specs + 1))
    specs: list[DistortionSpec] = []
    tries = 0
    while len(specs) < count and tries < max_tries:
        tries += 1
        duration = int(rng.integers(1, T + 1))
        onset = int(rng.integers(0, T - duration + 1))
        spec = DistortionSpec(KINDS[int(rng.integers(len(KINDS)))],
                              float(round(rng.uniform(0.1, 1.0), 4)), onset, duration)
        if any(spec.overlaps(s) for s in specs):
            continue
        specs.append(spec)
    return sorted(specs, key=lambda s: s.onset)


def make_clip(T: int, H: int, W: int, rng: np.random.Generator,
              specs: list[DistortionSpec] | None = None) -> tuple[np.ndarray, list[DistortionSpec]]:
    base = base_video(T, H, W, rng)
    if specs is None:
        specs = random_specs(T, rng)
    for a in range(len(specs)):
        for b in range(a + 1, len(specs)):
            if specs[a].overlaps(specs[b]):
                raise ValueError(f"overlapping distortion specs {specs[a]} and {specs[b]}")
    return apply_distortions(base, specs).astype(np.float32), specs


def generate_synthetic_dataset(out_dir: str | Path, count: int, T: int, H: int, W: int,
                               seed: int, test_fraction: float = 0.2) -> Path:
    """Write ``count`` clips plus ``manifest.tsv`` into ``out_dir``; returns the manifest path.

    Clip i draws all randomness from ``default_rng([seed, i])``; the 80/20
    train/test split is a seeded permutation over clip indices.
    """
    if count < 1:
        raise ValueError("count must be positive")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_test = int(round(count * test_fraction))
    perm = np.random.default_rng([seed, 0x5EED]).permutation(count)
    test_ids = set(perm[:n_test].tolist())
    entries = []
    for i in range(count):
        frames, specs = make_clip(T, H, W, np.random.default_rng([seed, i]))
        name = f"clip_{i:05d}.vqtc"
        save_clip(out / name, frames)
        entries.append(ManifestEntry(name, synthetic_label(specs, T),
                                     "test" if i in test_ids else "train", specs))
    manifest = out / "manifest.tsv"
    write_manifest(manifest, entries)
    return manifest
