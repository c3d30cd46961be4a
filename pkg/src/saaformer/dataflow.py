"""Scenes, train/test splits and the train/test window-overlap audit.

Coordinates are ``(row, col)`` pixel centers. A sample is the ``patch x patch``
window around its center; windows that stick out of the scene are filled by
mirror reflection (see :func:`extract_patches`).
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BadMagicError, ConstraintError, ExtentOverflowError, FormatError, TruncatedFileError
from .rng import stream

CUBE_MAGIC = b"HSIC"
CUBE_VERSION = 1
CUBE_HEADER = struct.Struct("<4sIIII")
# refuse headers describing more than 2**31 values (8 GiB of float32)
MAX_CUBE_VALUES = 2**31

BUCKETS = ("none", "partial", "high")


@dataclass
class HsiCube:
    """Scene values ``(H, W, C)`` (float32) with optional labels ``(H, W)``, 0 = unlabeled."""

    values: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype="<f4")
        if self.values.ndim != 3 or min(self.values.shape) < 1:
            raise ValueError(f"cube values must be a non-empty H x W x C array, got {self.values.shape}")
        if self.labels is not None:
            self.labels = np.ascontiguousarray(self.labels, dtype="<u2")
            if self.labels.shape != self.values.shape[:2]:
                raise ValueError(f"labels {self.labels.shape} do not match cube {self.values.shape[:2]}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    @property
    def n_classes(self) -> int:
        return 0 if self.labels is None else int(self.labels.max())


@dataclass
class SplitSpec:
    mode: str
    patch: int
    seed: int
    parameters: dict
    train: list[tuple[int, int]]
    test: list[tuple[int, int]]

    def __post_init__(self):
        if self.mode not in ("random", "block"):
            raise ValueError(f"unknown split mode {self.mode!r}")
        if self.patch < 1 or self.patch % 2 == 0:
            raise ValueError(f"patch size must be odd and positive, got {self.patch}")
        self.train = [(int(r), int(c)) for r, c in self.train]
        self.test = [(int(r), int(c)) for r, c in self.test]

    def validate(self, labels: np.ndarray) -> None:
        """Check centers are labeled, disjoint, and each class is on both sides."""
        h, w = labels.shape
        for name, pts in (("train", self.train), ("test", self.test)):
            for r, c in pts:
                if not (0 <= r < h and 0 <= c < w) or labels[r, c] == 0:
                    raise ConstraintError(f"{name} center ({r}, {c}) is not a labeled pixel")
        if set(self.train) & set(self.test):
            raise ConstraintError("train and test centers overlap")
        k = int(labels.max())
        for name, pts in (("train", self.train), ("test", self.test)):
            present = {int(labels[r, c]) for r, c in pts}
            missing = [cls for cls in range(1, k + 1) if cls not in present]
            if missing:
                raise ConstraintError(f"class {missing[0]} has no {name} samples")


# ---------------------------------------------------------------- synthetic scenes


def class_signature(rng: np.random.Generator, bands: int, n_peaks: int = 3) -> np.ndarray:
    """One spectrum: a sum of Gaussian bumps, min-max normalized to [0, 1]."""
    b = np.arange(bands, dtype=np.float64)
    centers = rng.uniform(0, bands, n_peaks)
    widths = rng.uniform(bands / 16, bands / 4, n_peaks)
    amps = rng.uniform(0.3, 1.0, n_peaks)
    s = (amps[:, None] * np.exp(-0.5 * ((b[None, :] - centers[:, None]) / widths[:, None]) ** 2)).sum(0)
    lo, hi = s.min(), s.max()
    return (s - lo) / (hi - lo) if hi > lo else np.zeros(bands)


def class_signatures(
    rng: np.random.Generator, k: int, bands: int, min_distance: float, tries: int = 200, restarts: int = 200
) -> np.ndarray:
    """``k`` signatures with pairwise L2 distance above ``min_distance``.

    Each class is redrawn until it clears every signature accepted before it;
    if one class needs more than ``tries`` draws the whole set starts over.
    """
    for _ in range(restarts):
        sigs: list[np.ndarray] = []
        for _ in range(k):
            for _ in range(tries):
                s = class_signature(rng, bands)
                if all(np.linalg.norm(s - o) > min_distance for o in sigs):
                    sigs.append(s)
                    break
            else:
                break
        if len(sigs) == k:
            return np.stack(sigs)
    raise ConstraintError(f"could not draw {k} signatures pairwise farther apart than {min_distance:.4g}")


def min_pairwise_distance(sigs: np.ndarray) -> float:
    d = np.sqrt(((sigs[:, None, :] - sigs[None, :, :]) ** 2).sum(-1))
    d[np.diag_indices(len(sigs))] = np.inf
    return float(d.min())


def generate_synthetic(
    height: int,
    width: int,
    bands: int,
    classes: int,
    tile: int,
    noise: float,
    seed: int,
) -> HsiCube:
    """Tiled scene with one class per tile and a noisy class signature per pixel.

    Signatures are redrawn until every pair is more than ``10 * noise * sqrt(bands)``
    apart in L2. Every pixel is labeled. Every class owns at least one tile, two
    when the grid has at least ``2 * classes`` tiles.
    """
    if tile < 1 or height % tile or width % tile:
        raise ValueError(f"tile {tile} must divide height {height} and width {width}")
    if classes < 2:
        raise ValueError("at least two classes are required")
    if noise < 0:
        raise ValueError("noise must be non-negative")
    th, tw = height // tile, width // tile
    n_tiles = th * tw
    if classes > n_tiles:
        raise ConstraintError(f"{classes} classes do not fit into {n_tiles} tiles")
    rng = stream(seed, "data")

    tile_class = rng.integers(1, classes + 1, n_tiles)
    # each class owns two tiles when there is room, so block splits aligned
    # with the tiles can put every class on both sides
    copies = 2 if n_tiles >= 2 * classes else 1
    forced = rng.permutation(n_tiles)[: copies * classes]
    tile_class[forced] = np.tile(np.arange(1, classes + 1), copies)

    sigs = class_signatures(rng, classes, bands, 10.0 * noise * math.sqrt(bands))

    labels = np.kron(tile_class.reshape(th, tw), np.ones((tile, tile), dtype=np.int64)).astype("<u2")
    values = sigs[labels.astype(np.int64) - 1]
    if noise > 0:
        values = values + rng.normal(0.0, noise, values.shape)
    return HsiCube(values.astype("<f4"), labels)


# ---------------------------------------------------------------- splits


def _labeled_by_class(labels: np.ndarray) -> dict[int, np.ndarray]:
    out = {}
    for cls in range(1, int(labels.max()) + 1):
        rows, cols = np.nonzero(labels == cls)
        out[cls] = np.stack([rows, cols], axis=1)
    return out


def _sorted(points) -> list[tuple[int, int]]:
    return sorted((int(r), int(c)) for r, c in points)


def random_split(labels: np.ndarray, fraction: float, patch: int, seed: int) -> SplitSpec:
    """Per class, ``ceil(fraction * count)`` (at least one) pixels go to train, the rest to test."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"train fraction must be in (0, 1], got {fraction}")
    rng = stream(seed, "split")
    train, test = [], []
    for cls, pts in _labeled_by_class(labels).items():
        n = len(pts)
        if n < 2:
            raise ConstraintError(f"class {cls} has {n} labeled pixels; need at least 2")
        # guard against fraction * n landing a hair above an integer
        n_train = max(1, math.ceil(fraction * n - 1e-9))
        if n_train >= n:
            raise ConstraintError(f"class {cls}: fraction {fraction} leaves no test samples")
        order = rng.permutation(n)
        train.extend(pts[order[:n_train]])
        test.extend(pts[order[n_train:]])
    return SplitSpec("random", patch, seed, {"train_fraction": fraction}, _sorted(train), _sorted(test))


def tile_grid(shape: tuple[int, int], block: int) -> np.ndarray:
    """Row-major tile index of every pixel; edge tiles may be partial."""
    h, w = shape
    cols = -(-w // block)
    r = np.arange(h)[:, None] // block
    c = np.arange(w)[None, :] // block
    return r * cols + c


def _dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    # Chebyshev dilation, separable
    out = mask.copy()
    for axis in (0, 1):
        src = out
        out = src.copy()
        n = src.shape[axis]
        for d in range(1, radius + 1):
            if d >= n:
                break
            lo = [slice(None)] * 2
            hi = [slice(None)] * 2
            lo[axis], hi[axis] = slice(d, None), slice(None, -d)
            out[tuple(lo)] |= src[tuple(hi)]
            out[tuple(hi)] |= src[tuple(lo)]
    return out


def territory(shape: tuple[int, int], block: int, gap: int, train_tiles) -> np.ndarray:
    """Raster with 1 = train territory, 2 = test territory, 0 = gap strip."""
    train = np.isin(tile_grid(shape, block), list(train_tiles))
    strip = _dilate(train, gap) & ~train
    return np.where(train, 1, np.where(strip, 0, 2)).astype(np.int8)


def _box_sum(mask: np.ndarray, r: int) -> np.ndarray:
    """Sum of ``mask`` over each ``(2r+1)^2`` window clipped to the array."""
    h, w = mask.shape
    ii = np.zeros((h + 1, w + 1), dtype=np.int64)
    ii[1:, 1:] = mask.astype(np.int64).cumsum(0).cumsum(1)
    r0 = np.clip(np.arange(h) - r, 0, h)
    r1 = np.clip(np.arange(h) + r + 1, 0, h)
    c0 = np.clip(np.arange(w) - r, 0, w)
    c1 = np.clip(np.arange(w) + r + 1, 0, w)
    return ii[r1][:, c1] - ii[r0][:, c1] - ii[r1][:, c0] + ii[r0][:, c0]


def territory_centers(terr: np.ndarray, labels: np.ndarray, patch: int, side: int) -> np.ndarray:
    """Labeled pixels whose in-scene window lies entirely in territory ``side``."""
    r = patch // 2
    inside = terr == side
    ok = _box_sum(inside, r) == _box_sum(np.ones_like(inside), r)
    return np.argwhere(ok & inside & (labels > 0))


def block_split(
    labels: np.ndarray,
    block: int,
    gap: int | None = None,
    patch: int = 5,
    seed: int = 0,
    stride: int = 4,
) -> SplitSpec:
    """Block-wise split with gap strips around the training tiles.

    Tiles whose row-major index ``t`` satisfies ``t % stride == seed % stride``
    are training territory, the others test territory. Test pixels within
    ``gap`` (Chebyshev) of a training tile are dropped. If a class is missing
    from either side, single tiles are flipped greedily (fewest labeled pixels
    first) until every class is on both sides.
    """
    if gap is None:
        gap = patch - 1
    if patch < 1 or patch % 2 == 0:
        raise ValueError(f"patch size must be odd and positive, got {patch}")
    if gap < patch - 1:
        raise ConstraintError(f"gap {gap} < patch - 1 = {patch - 1} does not prevent window overlap")
    if block < patch:
        raise ConstraintError(f"block {block} is smaller than the patch {patch}")
    if stride < 1:
        raise ValueError("stride must be positive")
    shape = labels.shape
    grid = tile_grid(shape, block)
    n_tiles = int(grid.max()) + 1
    classes = list(range(1, int(labels.max()) + 1))
    labeled_per_tile = np.bincount(grid[labels > 0], minlength=n_tiles)
    train_tiles = {t for t in range(n_tiles) if t % stride == seed % stride}

    def evaluate(tiles):
        terr = territory(shape, block, gap, tiles)
        tr = territory_centers(terr, labels, patch, 1)
        te = territory_centers(terr, labels, patch, 2)
        have_tr = set(np.unique(labels[tr[:, 0], tr[:, 1]]).tolist()) if len(tr) else set()
        have_te = set(np.unique(labels[te[:, 0], te[:, 1]]).tolist()) if len(te) else set()
        return tr, te, have_tr, have_te

    tr, te, have_tr, have_te = evaluate(train_tiles)
    for _ in range(n_tiles + len(classes) * 2):
        missing = [(c, "train") for c in classes if c not in have_tr] + [(c, "test") for c in classes if c not in have_te]
        if not missing:
            break
        cls, side = missing[0]
        source = (set(range(n_tiles)) - train_tiles) if side == "train" else train_tiles
        candidates = sorted(
            (t for t in source if np.any(labels[grid == t] == cls)),
            key=lambda t: (labeled_per_tile[t], t),
        )
        for t in candidates:
            trial = train_tiles ^ {t}
            ntr, nte, n_have_tr, n_have_te = evaluate(trial)
            gained = cls in (n_have_tr if side == "train" else n_have_te)
            if gained and have_tr <= n_have_tr and have_te <= n_have_te:
                train_tiles, tr, te, have_tr, have_te = trial, ntr, nte, n_have_tr, n_have_te
                break
        else:
            raise ConstraintError(f"class {cls} cannot be placed in both train and test sets with block {block}")
    else:  # pragma: no cover - each accepted flip removes a missing (class, side) pair
        raise ConstraintError("block split did not converge")

    params = {"block": block, "gap": gap, "stride": stride, "train_tiles": sorted(int(t) for t in train_tiles)}
    return SplitSpec("block", patch, seed, params, _sorted(tr), _sorted(te))


# ---------------------------------------------------------------- overlap audit


def overlap_rate(test_center, train_centers, patch: int) -> float:
    """Fraction of the test window covered by the union of training windows."""
    if patch % 2 == 0:
        raise ValueError("patch size must be odd")
    tr, tc = test_center
    covered = np.zeros((patch, patch), dtype=bool)
    for r, c in train_centers:
        dr, dc = r - tr, c - tc
        if abs(dr) >= patch or abs(dc) >= patch:
            continue
        covered[max(dr, 0) : patch + min(dr, 0), max(dc, 0) : patch + min(dc, 0)] = True
    return covered.sum() / patch**2


def overlap_rates(test_centers, train_centers, patch: int) -> np.ndarray:
    """Vectorised :func:`overlap_rate` for many test centers."""
    test = np.asarray(test_centers, dtype=np.int64).reshape(-1, 2)
    train = np.asarray(train_centers, dtype=np.int64).reshape(-1, 2)
    if len(test) == 0:
        return np.zeros(0)
    if len(train) == 0:
        return np.zeros(len(test))
    half = patch // 2
    lo = np.minimum(test.min(0), train.min(0)) - 2 * half
    hi = np.maximum(test.max(0), train.max(0)) + 2 * half
    canvas = np.zeros(tuple(hi - lo + 1), dtype=np.int64)
    for r, c in train - lo:
        canvas[r - half : r + half + 1, c - half : c + half + 1] = 1
    ii = np.zeros((canvas.shape[0] + 1, canvas.shape[1] + 1), dtype=np.int64)
    ii[1:, 1:] = canvas.cumsum(0).cumsum(1)
    t = test - lo
    r0, r1 = t[:, 0] - half, t[:, 0] + half + 1
    c0, c1 = t[:, 1] - half, t[:, 1] + half + 1
    counts = ii[r1, c1] - ii[r0, c1] - ii[r1, c0] + ii[r0, c0]
    return counts / patch**2


def bucket_overlap(rates) -> np.ndarray:
    """Bucket index per rate: 0 for no overlap, 1 for (0, 0.5], 2 for above 0.5."""
    rates = np.asarray(rates, dtype=np.float64)
    if rates.size and (rates.min() < 0 or rates.max() > 1):
        raise ValueError("overlap rates must lie in [0, 1]")
    return np.where(rates == 0, 0, np.where(rates <= 0.5, 1, 2))


def bucket_counts(rates) -> dict[str, int]:
    ids = bucket_overlap(rates)
    return {name: int((ids == i).sum()) for i, name in enumerate(BUCKETS)}


# ---------------------------------------------------------------- patches


def extract_patches(values: np.ndarray, centers, patch: int, dtype=np.float64) -> np.ndarray:
    """``(N, patch, patch, C)`` windows; out-of-scene pixels mirror across the edge."""
    centers = np.asarray(centers, dtype=np.int64).reshape(-1, 2)
    half = patch // 2
    padded = np.pad(values, ((half, half), (half, half), (0, 0)), mode="reflect")
    win = np.lib.stride_tricks.sliding_window_view(padded, (patch, patch), axis=(0, 1))
    # win: (H, W, C, patch, patch)
    out = win[centers[:, 0], centers[:, 1]]
    return np.ascontiguousarray(np.moveaxis(out, 1, -1), dtype=dtype)


# ---------------------------------------------------------------- file formats


def write_cube(path, cube: HsiCube) -> None:
    """Write the .hsic layout: header, float32 values, label flag, optional u16 labels."""
    h, w, c = cube.shape
    parts = [CUBE_HEADER.pack(CUBE_MAGIC, CUBE_VERSION, h, w, c), cube.values.astype("<f4").tobytes()]
    if cube.labels is None:
        parts.append(b"\x00")
    else:
        parts += [b"\x01", cube.labels.astype("<u2").tobytes()]
    Path(path).write_bytes(b"".join(parts))


def cube_file_size(h: int, w: int, c: int, labeled: bool) -> int:
    return CUBE_HEADER.size + 4 * h * w * c + 1 + (2 * h * w if labeled else 0)


def read_cube(path) -> HsiCube:
    raw = Path(path).read_bytes()
    # a short prefix of the magic is a cut-off cube, not a foreign file
    if not CUBE_MAGIC.startswith(raw[:4]) or not raw:
        raise BadMagicError(f"{path}: not a cube file (bad magic {raw[:4]!r})")
    if len(raw) < CUBE_HEADER.size:
        raise TruncatedFileError(f"{path}: header truncated at {len(raw)} bytes")
    _, version, h, w, c = CUBE_HEADER.unpack_from(raw)
    if version != CUBE_VERSION:
        raise FormatError(f"{path}: unsupported cube version {version}")
    if min(h, w, c) == 0:
        raise ExtentOverflowError(f"{path}: zero extent in header {h}x{w}x{c}")
    if h * w * c > MAX_CUBE_VALUES:
        raise ExtentOverflowError(f"{path}: header extents {h}x{w}x{c} exceed {MAX_CUBE_VALUES} values")
    n_values = h * w * c
    off = CUBE_HEADER.size
    if len(raw) < off + 4 * n_values + 1:
        raise TruncatedFileError(f"{path}: expected at least {off + 4 * n_values + 1} bytes, got {len(raw)}")
    values = np.frombuffer(raw, dtype="<f4", count=n_values, offset=off).reshape(h, w, c)
    off += 4 * n_values
    flag = raw[off]
    off += 1
    labels = None
    if flag == 1:
        if len(raw) < off + 2 * h * w:
            raise TruncatedFileError(f"{path}: label block truncated")
        labels = np.frombuffer(raw, dtype="<u2", count=h * w, offset=off).reshape(h, w)
        off += 2 * h * w
    elif flag != 0:
        raise FormatError(f"{path}: label flag must be 0 or 1, got {flag}")
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes")
    return HsiCube(values.copy(), None if labels is None else labels.copy())


def split_to_dict(split: SplitSpec) -> dict:
    return {
        "mode": split.mode,
        "patch": split.patch,
        "seed": split.seed,
        "parameters": split.parameters,
        "train": [list(p) for p in split.train],
        "test": [list(p) for p in split.test],
    }


def write_split(path, split: SplitSpec) -> None:
    Path(path).write_text(json.dumps(split_to_dict(split), sort_keys=True) + "\n")


def read_split(path) -> SplitSpec:
    try:
        obj = json.loads(Path(path).read_text())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: split file is not valid JSON ({exc})") from None
    if not isinstance(obj, dict):
        raise FormatError(f"{path}: split file must hold a JSON object")
    missing = [k for k in ("mode", "patch", "seed", "parameters", "train", "test") if k not in obj]
    if missing:
        raise FormatError(f"{path}: split file lacks field {missing[0]!r}")
    try:
        return SplitSpec(
            obj["mode"], int(obj["patch"]), int(obj["seed"]), dict(obj["parameters"]),
            [tuple(p) for p in obj["train"]], [tuple(p) for p in obj["test"]],
        )
    except (TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed split file ({exc})") from None
