"""The full model: tokenizer, divided space-time encoder blocks, quality head, training."""

from __future__ import annotations

import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields, replace
from typing import Callable

import numpy as np

from . import tensor as vt
from .attention import (
    REDUCERS,
    AttentionParams,
    dense_temporal_attention,
    init_attention_params,
    spatial_attention,
)
from .data import FormatError, Manifest, RawClip, _atomic_write, load_clip
from .metrics import MetricReport, UndefinedCorrelationError, evaluate
from .mptn import MODES, mptn_forward, plan_pathways
from .optim import AdamW
from .tensor import NonFiniteError, Tensor
from .tokenizer import ConfigError, embed, patchify

ModelParams = dict[str, Tensor]


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 12
    dim: int = 768
    heads: int = 12
    patch: int = 16
    frames: int = 96
    height: int = 224
    width: int = 224
    mlp_ratio: float = 4.0
    temporal: str = "mptn"  # mptn | dense
    mptn_mode: str = "scatter"
    reducer: str = "kl"
    strict_selection: bool = False
    share_pathways: bool = False
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.height % self.patch or self.width % self.patch:
            raise ConfigError(f"H={self.height}, W={self.width} not divisible by P={self.patch}")
        if self.temporal not in ("mptn", "dense"):
            raise ConfigError(f"temporal must be mptn or dense, got {self.temporal!r}")
        if self.mptn_mode not in MODES:
            raise ConfigError(f"mptn_mode must be scatter or literal, got {self.mptn_mode!r}")
        if self.reducer not in REDUCERS:
            raise ConfigError(f"unknown reducer {self.reducer!r}")
        if self.mptn_mode == "scatter" and self.reducer not in ("kl", "random"):
            raise ConfigError(f"reducer {self.reducer!r} mixes frames; use mptn_mode=literal")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        if name == "tiny":
            base = cls(depth=2, dim=32, heads=2, patch=8, frames=8, height=32, width=32)
        elif name == "default":
            base = cls()
        else:
            raise ConfigError(f"unknown preset {name!r}; expected tiny or default")
        return replace(base, **overrides)

    @property
    def patches(self) -> int:
        return (self.height // self.patch) * (self.width // self.patch)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, raw = line.partition("=")
            key = key.strip()
            if key not in types:
                raise ConfigError(f"unknown model config key {key!r}")
            values[key] = _parse_value(types[key], raw.strip())
        return cls(**values)


def _parse_value(kind: str, raw: str):
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind == "bool":
        if raw not in ("True", "False", "true", "false", "1", "0"):
            raise ConfigError(f"not a boolean: {raw!r}")
        return raw in ("True", "true", "1")
    return raw


# ------------------------------------------------------------------ params


def _pathway_count(config: ModelConfig) -> int:
    if config.temporal == "dense":
        return 1
    return 1 if config.share_pathways else len(plan_pathways(config.frames).budgets)


def init_params(config: ModelConfig, seed: int | None = None,
                head_bias: float = 0.0) -> ModelParams:
    """Fresh parameters; deterministic in ``config.seed`` (or ``seed``).

    Training starts the head bias at the mean training label, so AdamW's
    roughly lr-sized steps go into content features rather than into slowly
    walking the output up to the label range.
    """
    rng = np.random.default_rng([config.seed if seed is None else seed, 0x1A17])
    dt = config.np_dtype
    d = config.dim
    D = 3 * config.patch**2
    T, N = config.frames, config.patches
    hidden = int(round(d * config.mlp_ratio))
    params: ModelParams = {}

    def add(name, value):
        params[name] = Tensor(np.asarray(value), requires_grad=True, dtype=dt)

    def xavier(n_in, n_out):
        bound = math.sqrt(6.0 / (n_in + n_out))
        return rng.uniform(-bound, bound, size=(n_in, n_out))

    add("tokenizer.w_embed", xavier(D, d).T)
    add("tokenizer.pos", rng.normal(0, 0.02, size=(T * N + 1, d)))
    add("tokenizer.quality", rng.normal(0, 0.02, size=(1, d)))
    budgets = plan_pathways(T).budgets if config.temporal == "mptn" else (T,)
    for layer in range(config.depth):
        pre = f"blocks.{layer}"
        for norm in ("norm_t", "norm_s", "norm_m"):
            add(f"{pre}.{norm}.gain", np.ones(d))
            add(f"{pre}.{norm}.bias", np.zeros(d))
        if config.temporal == "dense":
            _add_attention(params, f"{pre}.temporal", init_attention_params(d, config.heads, rng, dt))
        else:
            learned_mix = config.reducer in ("linear", "conv")
            for a in range(_pathway_count(config)):
                p = init_attention_params(d, config.heads, rng, dt, offsets=True,
                                          mix=(budgets[a], T) if learned_mix else None)
                _add_attention(params, f"{pre}.temporal.{a}", p)
        _add_attention(params, f"{pre}.spatial", init_attention_params(d, config.heads, rng, dt))
        add(f"{pre}.mlp.w1", xavier(d, hidden))
        add(f"{pre}.mlp.b1", np.zeros(hidden))
        add(f"{pre}.mlp.w2", xavier(hidden, d))
        add(f"{pre}.mlp.b2", np.zeros(d))
    add("norm.gain", np.ones(d))
    add("norm.bias", np.zeros(d))
    add("head.w", rng.normal(0, 0.02, size=(d, 1)))
    add("head.b", np.full(1, head_bias))
    return params


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape of every parameter :func:`init_params` would create, without allocating."""
    d, T = config.dim, config.frames
    hidden = int(round(d * config.mlp_ratio))
    shapes = {"tokenizer.w_embed": (d, 3 * config.patch**2),
              "tokenizer.pos": (T * config.patches + 1, d), "tokenizer.quality": (1, d)}
    budgets = plan_pathways(T).budgets if config.temporal == "mptn" else (T,)

    def attn(prefix, offsets=False, budget=None):
        for w in ("w_q", "w_k", "w_v", "w_o"):
            shapes[f"{prefix}.{w}"] = (d, d)
        if offsets:
            shapes[f"{prefix}.offset_w"] = (d, 2)
            shapes[f"{prefix}.offset_b"] = (2,)
        if budget is not None:
            shapes[f"{prefix}.mix_w"] = (budget, T)
            shapes[f"{prefix}.mix_b"] = (budget,)

    for layer in range(config.depth):
        pre = f"blocks.{layer}"
        for norm in ("norm_t", "norm_s", "norm_m"):
            shapes[f"{pre}.{norm}.gain"] = (d,)
            shapes[f"{pre}.{norm}.bias"] = (d,)
        if config.temporal == "dense":
            attn(f"{pre}.temporal")
        else:
            learned_mix = config.reducer in ("linear", "conv")
            for a in range(_pathway_count(config)):
                attn(f"{pre}.temporal.{a}", True, budgets[a] if learned_mix else None)
        attn(f"{pre}.spatial")
        shapes.update({f"{pre}.mlp.w1": (d, hidden), f"{pre}.mlp.b1": (hidden,),
                       f"{pre}.mlp.w2": (hidden, d), f"{pre}.mlp.b2": (d,)})
    shapes.update({"norm.gain": (d,), "norm.bias": (d,), "head.w": (d, 1), "head.b": (1,)})
    return shapes


def _add_attention(params: ModelParams, prefix: str, p: AttentionParams) -> None:
    for name, t in p.named().items():
        params[f"{prefix}.{name}"] = t


def _attention(params: ModelParams, prefix: str, heads: int) -> AttentionParams:
    def get(name):
        return params.get(f"{prefix}.{name}")

    return AttentionParams(get("w_q"), get("w_k"), get("w_v"), get("w_o"), heads,
                           get("offset_w"), get("offset_b"), get("mix_w"), get("mix_b"))


# ------------------------------------------------------------------ forward


def _mlp(x: Tensor, params: ModelParams, pre: str) -> Tensor:
    h = vt.gelu(vt.add(vt.matmul(x, params[f"{pre}.mlp.w1"]), params[f"{pre}.mlp.b1"]))
    return vt.add(vt.matmul(h, params[f"{pre}.mlp.w2"]), params[f"{pre}.mlp.b2"])


def _norm(x: Tensor, params: ModelParams, name: str) -> Tensor:
    return vt.layer_norm(x, params[f"{name}.gain"], params[f"{name}.bias"])


def _frames(clip: RawClip | np.ndarray) -> np.ndarray:
    return clip.frames if isinstance(clip, RawClip) else np.asarray(clip)


def forward(clip: RawClip | np.ndarray, params: ModelParams, config: ModelConfig,
            rng: np.random.Generator, trace: list | None = None) -> Tensor:
    """Predicted quality score (0-d tensor) for one clip.

    Each block: pre-norm temporal stage (multi-pathway sparse or dense) with
    residual, pre-norm spatial attention (quality token included) with
    residual, pre-norm MLP with residual. The final quality token feeds a
    linear head. Keyframe selections are appended to ``trace`` if given.
    """
    frames = _frames(clip)
    expect = (config.frames, config.height, config.width, 3)
    if frames.shape != expect:
        raise ConfigError(f"clip shape {frames.shape} does not match config {expect}")
    dt = config.np_dtype
    grid = embed(patchify(frames.astype(dt, copy=False), config.patch),
                 params["tokenizer.w_embed"], params["tokenizer.pos"],
                 params["tokenizer.quality"])
    x, c = grid.tokens, grid.quality_token
    plan = plan_pathways(config.frames) if config.temporal == "mptn" else None
    block_rngs = rng.spawn(config.depth)
    for layer in range(config.depth):
        pre = f"blocks.{layer}"
        h = _norm(x, params, f"{pre}.norm_t")
        if plan is None:
            t_out = dense_temporal_attention(h, _attention(params, f"{pre}.temporal", config.heads))
        else:
            n = len(plan.budgets)
            ids = [0] * n if config.share_pathways else list(range(n))
            pathways = [_attention(params, f"{pre}.temporal.{a}", config.heads) for a in ids]
            t_out, sels = mptn_forward(h, pathways, plan, block_rngs[layer],
                                       mode=config.mptn_mode, strict=config.strict_selection,
                                       reducer=config.reducer)
            if trace is not None:
                for a, sel in enumerate(sels):
                    if sel is not None:
                        trace.append(sel.to_record(block=layer, pathway=a))
        x = vt.add(x, t_out)
        s_out, c_out = spatial_attention(_norm(x, params, f"{pre}.norm_s"),
                                         _attention(params, f"{pre}.spatial", config.heads),
                                         _norm(c, params, f"{pre}.norm_s"))
        x = vt.add(x, s_out)
        c = vt.add(c, c_out)
        x = vt.add(x, _mlp(_norm(x, params, f"{pre}.norm_m"), params, pre))
        c = vt.add(c, _mlp(_norm(c, params, f"{pre}.norm_m"), params, pre))
    score = vt.add(vt.matmul(_norm(c, params, "norm"), params["head.w"]), params["head.b"])
    return vt.reshape(score, ())


def smooth_l1(pred, label, beta: float = 1.0) -> Tensor:
    """Mean smooth-L1: 0.5 e^2 / beta where |e| < beta, else |e| - 0.5 beta."""
    pred = pred if isinstance(pred, Tensor) else Tensor(np.asarray(pred, dtype=np.float64))
    label = np.asarray(label, dtype=pred.dtype)
    e = vt.sub(pred, label)
    small = np.abs(e.data) < beta
    quad = vt.scale(vt.mul(e, e), 0.5 / beta)
    lin = vt.sub(vt.abs(e), 0.5 * beta)
    return vt.mean(vt.where(small, quad, lin))


# ---------------------------------------------------------------- inference


def score_rng(config: ModelConfig) -> np.random.Generator:
    """Scoring draws the same stream for every clip, so scores are order-independent."""
    return np.random.default_rng([config.seed, 0x5C0E])


def predict(clips: list, params: ModelParams, config: ModelConfig,
            workers: int | None = None, traces: list | None = None) -> np.ndarray:
    """Scores for a list of clips, optionally fanned out over threads (read-only params)."""
    if workers is None:
        workers = max(1, int(os.environ.get("VQT_THREADS", "1")))

    def one(i):
        trace = [] if traces is not None else None
        with vt.no_grad():
            s = forward(clips[i], params, config, score_rng(config), trace=trace).item()
        return s, trace

    if workers > 1 and len(clips) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, range(len(clips))))
    else:
        results = [one(i) for i in range(len(clips))]
    if traces is not None:
        traces.extend(t for _, t in results)
    return np.array([s for s, _ in results])


# ----------------------------------------------------------------- training


def no_decay_names(params: ModelParams) -> list[str]:
    """Biases, norm gains and the token tables are left out of weight decay."""
    return [k for k, t in params.items()
            if t.ndim <= 1 or k.startswith("tokenizer.pos") or k.startswith("tokenizer.quality")]


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainSettings:
    epochs: int = 60
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 0.1
    betas: tuple[float, float] = (0.9, 0.999)
    decay_every: int = 30
    decay_factor: float = 0.1


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    plcc: float
    srocc: float
    krocc: float
    rmse: float

    def to_line(self) -> str:
        vals = [self.train_loss, self.plcc, self.srocc, self.krocc, self.rmse]
        return "\t".join([str(self.epoch)] + [f"{v:.6f}" for v in vals])


def _load_split(manifest: Manifest, split: str, dtype) -> tuple[list[np.ndarray], np.ndarray]:
    entries = manifest.split(split)
    clips = [load_clip(manifest.resolve(e)).frames.astype(dtype) for e in entries]
    return clips, np.array([e.label for e in entries], dtype=np.float64)


def train(data: Manifest | tuple, config: ModelConfig, settings: TrainSettings,
          params: ModelParams | None = None,
          on_epoch: Callable[[EpochLog], None] | None = None,
          ) -> tuple[ModelParams, list[EpochLog]]:
    """Mini-batch AdamW on mean smooth-L1 with a step learning-rate decay.

    ``data`` is a manifest, or ``(train_clips, train_labels, test_clips,
    test_labels)`` already in memory. Each epoch ends with test-split metrics
    (NaN when the test split is empty or predictions are constant).
    """
    if isinstance(data, Manifest):
        train_clips, train_y = _load_split(data, "train", config.np_dtype)
        test_clips, test_y = _load_split(data, "test", config.np_dtype)
    else:
        train_clips, train_y, test_clips, test_y = data
        train_y = np.asarray(train_y, dtype=np.float64)
    if not len(train_clips):
        raise TrainingError("training split is empty")
    if params is None:
        params = init_params(config, head_bias=float(train_y.mean()))
    opt = AdamW(params, lr=settings.lr, betas=settings.betas,
                weight_decay=settings.weight_decay, no_decay=no_decay_names(params))
    log: list[EpochLog] = []
    n = len(train_clips)
    for epoch in range(settings.epochs):
        opt.lr = settings.lr * settings.decay_factor ** (epoch // settings.decay_every)
        order = np.random.default_rng([config.seed, epoch, 1]).permutation(n)
        total, seen = 0.0, 0
        for b, start in enumerate(range(0, n, settings.batch_size)):
            batch = order[start:start + settings.batch_size]
            opt.zero_grad()
            try:
                preds = [vt.reshape(forward(train_clips[i], params, config,
                                            np.random.default_rng([config.seed, epoch, int(i)])),
                                    (1,)) for i in batch]
                loss = smooth_l1(vt.concat(preds), train_y[batch])
                loss.backward()
            except NonFiniteError as exc:
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}: {exc}") from exc
            for p in params.values():
                if p.grad is None:  # unused this step (e.g. strict selection chose nothing)
                    p.grad = np.zeros_like(p.data)
            opt.step()
            total += loss.item() * len(batch)
            seen += len(batch)
        report = _safe_eval(test_clips, test_y, params, config)
        entry = EpochLog(epoch, total / seen, report.plcc, report.srocc, report.krocc, report.rmse)
        log.append(entry)
        if on_epoch is not None:
            on_epoch(entry)
    return params, log


def _safe_eval(clips, labels, params, config) -> MetricReport:
    nan = float("nan")
    if len(clips) < 2:
        return MetricReport(nan, nan, nan, nan, len(clips))
    preds = predict(clips, params, config, workers=1)
    try:
        return evaluate(preds, labels)
    except UndefinedCorrelationError:
        return MetricReport(nan, nan, nan, float(np.sqrt(np.mean((preds - labels) ** 2))),
                            len(clips))


# --------------------------------------------------------------- checkpoint

CKPT_MAGIC = b"VQTW"
CKPT_VERSION = 1
_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAG_OF = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class CheckpointError(FormatError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class MissingKeyError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


def save_checkpoint(path, params: ModelParams, config: ModelConfig) -> None:
    """Layout (little-endian): b"VQTW", u32 version, u32 n + config text, u32 count,
    then per tensor: u32 n + name, u8 dtype tag, u32 rank, u64 dims, raw data."""
    text = config.to_text().encode()
    out = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(text)), text,
           struct.pack("<I", len(params))]
    for name, t in params.items():
        raw = name.encode()
        data = t.data
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack("<BI", _TAG_OF[data.dtype], data.ndim))
        out.append(struct.pack(f"<{data.ndim}Q", *data.shape))
        out.append(data.astype(data.dtype.newbyteorder("<"), copy=False).tobytes(order="C"))
    _atomic_write(path, b"".join(out))


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CorruptCheckpointError(f"{self.path}: truncated at byte {self.pos}")
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    raw = open(path, "rb").read()
    if raw[:4] != CKPT_MAGIC:
        raise CorruptCheckpointError(f"{path}: not a checkpoint (bad magic)")
    r = _Reader(raw, path)
    r.take(4)
    version, n = r.unpack("<II")
    if version != CKPT_VERSION:
        raise VersionMismatchError(f"{path}: checkpoint version {version}, "
                                   f"this build reads {CKPT_VERSION}")
    try:
        config = ModelConfig.from_text(r.take(n).decode())
    except (UnicodeDecodeError, ValueError, TypeError) as exc:
        raise CorruptCheckpointError(f"{path}: bad config block: {exc}") from None
    (count,) = r.unpack("<I")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (klen,) = r.unpack("<I")
        try:
            name = r.take(klen).decode()
        except UnicodeDecodeError:
            raise CorruptCheckpointError(f"{path}: bad tensor name") from None
        tag, rank = r.unpack("<BI")
        if tag not in _DTYPE_TAGS:
            raise CorruptCheckpointError(f"{path}: unknown dtype tag {tag} for {name}")
        shape = r.unpack(f"<{rank}Q")
        dt = _DTYPE_TAGS[tag]
        size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arrays[name] = np.frombuffer(r.take(size), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    if r.pos != len(raw):
        raise CorruptCheckpointError(f"{path}: {len(raw) - r.pos} trailing bytes")
    return config, arrays


def load_checkpoint(path, config: ModelConfig | None = None) -> tuple[ModelConfig, ModelParams]:
    """Read a checkpoint; with ``config``, validate against that model's parameter layout."""
    saved, arrays = read_checkpoint(path)
    target = saved if config is None else config
    template = param_shapes(target)
    for name, shape in template.items():
        if name not in arrays:
            raise MissingKeyError(f"{path}: missing key {name!r}")
        if arrays[name].shape != shape:
            raise ShapeMismatchError(f"{path}: shape mismatch at {name!r}: checkpoint "
                                     f"{arrays[name].shape}, model {shape}")
    extra = sorted(set(arrays) - set(template))
    if extra:
        raise MissingKeyError(f"{path}: unexpected key {extra[0]!r} not in model")
    params = {name: Tensor(arrays[name], requires_grad=True) for name in template}
    return target, params
