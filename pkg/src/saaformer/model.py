"""End-to-end classifier: embedding, multi-level encoder stages, pooled head."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import numerics as nm
from .dataflow import HsiCube, SplitSpec, extract_patches
from .errors import BadMagicError, ConstraintError, FormatError, TruncatedFileError
from .layers import (
    AdamState,
    LinearParams,
    NormParams,
    adam_step,
    cross_entropy,
    dropout,
    init_layer_norm,
    init_linear,
    layer_norm,
    linear,
)
from .numerics import Tensor
from .rng import stream
from .spectral_encoder import EVAL, ForwardMode, PartitionPlan, StageParams, init_stage, multi_level_forward

log = logging.getLogger(__name__)

CKPT_MAGIC = b"SAAF"
CKPT_VERSION = 1


@dataclass
class SaaFormerConfig:
    in_bands: int
    classes: int
    embed: int = 128
    heads: int = 4
    depth: int = 2
    levels: tuple[int, ...] = (128, 64, 32)
    patch: int = 5
    dropout: float = 0.1

    def __post_init__(self):
        self.levels = tuple(int(c) for c in self.levels)
        if self.in_bands < 1 or self.classes < 2:
            raise ValueError("need at least one input band and two classes")
        if self.embed % self.heads:
            raise ValueError(f"{self.heads} heads do not divide embed width {self.embed}")
        if self.patch < 1 or self.patch % 2 == 0:
            raise ValueError(f"patch size must be odd, got {self.patch}")
        if self.depth < 1:
            raise ValueError("depth must be at least 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        plan = self.plan  # validates divisibility and evenness
        for c in plan.levels:
            if (c // 2) % self.heads:
                raise ValueError(f"{self.heads} heads do not divide half-partition width {c // 2}")

    @property
    def plan(self) -> PartitionPlan:
        return PartitionPlan(self.embed, self.levels)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["levels"] = list(self.levels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> SaaFormerConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def default_levels(embed: int) -> tuple[int, ...]:
    """Dyadic partition lengths ``(E, E/2, E/4)``, dropping any that stop being even divisors."""
    out = []
    for div in (1, 2, 4):
        c = embed // div
        if c >= 2 and c % 2 == 0 and embed % c == 0:
            out.append(c)
    return tuple(out)


@dataclass
class TrainConfig:
    epochs: int = 200
    batch: int = 64
    lr: float = 5e-4
    decay: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch < 1 or self.lr < 0:
            raise ValueError("epochs >= 0, batch >= 1 and lr >= 0 are required")

    @property
    def decay_every(self) -> int:
        return max(1, math.ceil(self.epochs / 10))

    def lr_after(self, epochs_done: int) -> float:
        """Learning rate in effect once ``epochs_done`` epochs have finished."""
        return self.lr * self.decay ** (epochs_done // self.decay_every)


@dataclass
class SaaFormerParams:
    embed: LinearParams
    stages: list[StageParams]
    head_norm: NormParams
    head: LinearParams


def init_params(cfg: SaaFormerConfig, rng: np.random.Generator, dtype=np.float64) -> SaaFormerParams:
    plan = cfg.plan
    return SaaFormerParams(
        embed=init_linear(rng, cfg.in_bands, cfg.embed, dtype=dtype),
        stages=[init_stage(rng, plan, cfg.heads, cfg.patch, dtype) for _ in range(cfg.depth)],
        head_norm=init_layer_norm(cfg.embed, dtype),
        head=init_linear(rng, cfg.embed, cfg.classes, dtype=dtype),
    )


# ---------------------------------------------------------------- parameter walking


def _walk(obj, prefix: str) -> Iterator[tuple[str, object, str]]:
    if dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            value = getattr(obj, f.name)
            name = f"{prefix}.{f.name}" if prefix else f.name
            if isinstance(value, (Tensor, np.ndarray)):
                yield name, obj, f.name
            else:
                yield from _walk(value, name)
    elif isinstance(obj, list):
        for i, item in enumerate(obj):
            yield from _walk(item, f"{prefix}.{i}")


def named_parameters(params) -> list[tuple[str, Tensor]]:
    """Learnable tensors in declaration order."""
    return [(n, getattr(o, a)) for n, o, a in _walk(params, "") if isinstance(getattr(o, a), Tensor)]


def named_arrays(params) -> list[tuple[str, np.ndarray]]:
    """Every stored array (parameters and running statistics) in declaration order."""
    out = []
    for n, o, a in _walk(params, ""):
        v = getattr(o, a)
        out.append((n, v.data if isinstance(v, Tensor) else v))
    return out


def parameters(params) -> list[Tensor]:
    return [t for _, t in named_parameters(params)]


def parameter_count(params) -> int:
    return sum(t.size for t in parameters(params))


# ---------------------------------------------------------------- forward


def forward(x, params: SaaFormerParams, cfg: SaaFormerConfig, mode: ForwardMode = EVAL) -> Tensor:
    """Logits ``(N, K)`` for a batch of patches ``(N, p, p, C_in)``.

    A single unbatched patch ``(p, p, C_in)`` gives logits ``(K,)``.
    """
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    single = x.ndim == 3
    if single:
        x = nm.reshape(x, (1,) + x.shape)
    n, h, w, c = x.shape
    if (h, w, c) != (cfg.patch, cfg.patch, cfg.in_bands):
        raise ValueError(f"sample shape {(h, w, c)} does not match {(cfg.patch, cfg.patch, cfg.in_bands)}")
    f = dropout(linear(x, params.embed), mode.dropout, mode.training, mode.rng)
    for stage in params.stages:
        f = multi_level_forward(f, stage, cfg.plan, mode)
    f = layer_norm(f, params.head_norm)
    pooled = nm.mean_axis(nm.reshape(f, (n, h * w, cfg.embed)), 1)
    logits = linear(pooled, params.head)
    return nm.reshape(logits, (cfg.classes,)) if single else logits


def predict(patches: np.ndarray, params, cfg, batch: int = 256) -> np.ndarray:
    """Eval-mode class ids (1-based) for a stack of patches."""
    out = np.empty(len(patches), dtype=np.int64)
    for s in range(0, len(patches), batch):
        logits = forward(patches[s : s + batch], params, cfg, EVAL)
        out[s : s + batch] = logits.data.argmax(axis=1) + 1
    return out


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    params: SaaFormerParams
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)

    def trace(self) -> list[dict]:
        return [{"epoch": i + 1, "loss": l, "lr": r} for i, (l, r) in enumerate(zip(self.losses, self.lrs))]


def train(
    cube: HsiCube,
    split: SplitSpec,
    cfg: SaaFormerConfig,
    tcfg: TrainConfig,
    params: SaaFormerParams | None = None,
) -> TrainResult:
    """Minibatch Adam on the split's training centers.

    Randomness comes from the ``init``, ``shuffle`` and ``dropout`` streams of
    ``tcfg.seed``; two runs with the same inputs are bit-identical.
    """
    if cube.labels is None:
        raise ConstraintError("training needs a labeled cube")
    if not split.train:
        raise ConstraintError("the split has no training samples")
    if split.patch != cfg.patch:
        raise ConstraintError(f"split patch {split.patch} != model patch {cfg.patch}")
    centers = np.asarray(split.train)
    y = cube.labels[centers[:, 0], centers[:, 1]].astype(np.int64)
    present = set(np.unique(y).tolist())
    for cls in range(1, cfg.classes + 1):
        if cls not in present:
            raise ConstraintError(f"class {cls} has no training samples")
    if y.max() > cfg.classes:
        raise ConstraintError(f"label {y.max()} exceeds the configured {cfg.classes} classes")
    x = extract_patches(cube.values, centers, cfg.patch)

    if params is None:
        params = init_params(cfg, stream(tcfg.seed, "init"))
    shuffle_rng = stream(tcfg.seed, "shuffle")
    mode = ForwardMode(True, cfg.dropout, stream(tcfg.seed, "dropout"))
    plist = parameters(params)
    state = AdamState(lr=tcfg.lr)
    result = TrainResult(params)

    for epoch in range(tcfg.epochs):
        state.lr = tcfg.lr_after(epoch)
        order = shuffle_rng.permutation(len(y))
        total = 0.0
        for s in range(0, len(y), tcfg.batch):
            idx = order[s : s + tcfg.batch]
            with nm.Tape() as tape:
                loss = cross_entropy(forward(x[idx], params, cfg, mode), y[idx] - 1)
            tape.backward(loss)
            adam_step(plist, [p.grad for p in plist], state)
            nm.zero_grad(plist)
            total += loss.item() * len(idx)
        result.losses.append(total / len(y))
        result.lrs.append(state.lr)
        log.info("epoch %d/%d loss %.6f lr %.3g", epoch + 1, tcfg.epochs, result.losses[-1], state.lr)
    return result


def predict_map(cube: HsiCube, params, cfg: SaaFormerConfig, batch: int = 256) -> np.ndarray:
    """Predicted class per labeled pixel (every pixel if the cube is unlabeled); 0 elsewhere."""
    h, w, _ = cube.shape
    mask = np.ones((h, w), bool) if cube.labels is None else cube.labels > 0
    centers = np.argwhere(mask)
    out = np.zeros((h, w), dtype=np.uint16)
    if len(centers):
        pred = predict(extract_patches(cube.values, centers, cfg.patch), params, cfg, batch)
        out[centers[:, 0], centers[:, 1]] = pred
    return out


# ---------------------------------------------------------------- checkpoints
#
# layout (little-endian):
#   "SAAF" | u32 version | u32 n | n bytes of UTF-8 JSON config (sorted keys)
#   | u32 count | count x ( u16 name length | name | u8 ndim | ndim x u32 | float32 data )
# arrays are every parameter and running statistic in declaration order


def checkpoint_bytes(params: SaaFormerParams, cfg: SaaFormerConfig) -> bytes:
    conf = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":")).encode()
    arrays = named_arrays(params)
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(conf)), conf, struct.pack("<I", len(arrays))]
    for name, arr in arrays:
        raw = name.encode()
        parts.append(struct.pack("<HB", len(raw), arr.ndim) + raw)
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(path, params: SaaFormerParams, cfg: SaaFormerConfig) -> None:
    Path(path).write_bytes(checkpoint_bytes(params, cfg))


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.off, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.raw):
            raise TruncatedFileError(f"{self.path}: checkpoint truncated at byte {len(self.raw)}")
        out = self.raw[self.off : self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def load_checkpoint(path) -> tuple[SaaFormerParams, SaaFormerConfig]:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise BadMagicError(f"{path}: not a checkpoint (bad magic {raw[:4]!r})")
    r = _Reader(raw, path)
    r.take(4)
    version, n = r.unpack("<II")
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        cfg = SaaFormerConfig.from_dict(json.loads(r.take(n).decode()))
    except (UnicodeDecodeError, json.JSONDecodeError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: bad config block ({exc})") from None
    params = init_params(cfg, np.random.default_rng(0))
    slots = list(_walk(params, ""))
    (count,) = r.unpack("<I")
    if count != len(slots):
        raise FormatError(f"{path}: {count} arrays stored, configuration needs {len(slots)}")
    for name, obj, attr in slots:
        name_len, ndim = r.unpack("<HB")
        stored = r.take(name_len).decode(errors="replace")
        if stored != name:
            raise FormatError(f"{path}: expected array {name!r}, found {stored!r}")
        shape = r.unpack(f"<{ndim}I")
        target = getattr(obj, attr)
        if tuple(shape) != target.shape:
            raise FormatError(f"{path}: array {name} has shape {shape}, expected {target.shape}")
        size = int(np.prod(shape))
        data = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape).astype(np.float64)
        if isinstance(target, Tensor):
            target.data = data
        else:
            target[...] = data
    if r.off != len(raw):
        raise FormatError(f"{path}: {len(raw) - r.off} trailing bytes")
    return params, cfg
