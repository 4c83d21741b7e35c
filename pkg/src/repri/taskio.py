"""Task and feature I/O: binary containers, mask downsampling, the
synthetic task generator, and the class-based episode sampler.

Container format (little-endian throughout)::

    magic   4 bytes  "RPRI"
    version u32      currently 1
    count   u32      number of arrays
    per array:
        name_len u16, name bytes (UTF-8)
        dtype    u8   (1 = float32, 2 = uint8)
        ndim     u8
        dims     ndim * u64
        payload  raw row-major bytes, product(dims) * itemsize long

Array names are unique within a file; writes are atomic (temp file +
rename); a write/read round trip is byte-identical.

Randomness: every generator in this module uses the Philox4x64-10
counter-based PRNG (``numpy.random.Philox``), with sub-stream keys
derived by splitmix64 folding, so identical seeds produce identical
streams on every platform.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import FeatureMap, InvariantError, PixelMask, RepriError, TaskInstance

MAGIC = b"RPRI"
VERSION = 1
DTYPE_F32 = 1
DTYPE_U8 = 2
_DTYPE_TO_CODE = {np.dtype(np.float32): DTYPE_F32, np.dtype(np.uint8): DTYPE_U8}
_CODE_TO_DTYPE = {DTYPE_F32: np.dtype(np.float32), DTYPE_U8: np.dtype(np.uint8)}

TASK_SUPPORT_FEATURES = "support_features"
TASK_SUPPORT_MASKS = "support_masks"
TASK_QUERY_FEATURES = "query_features"
TASK_QUERY_MASK = "query_mask"
TASK_CLASS_ID = "class_id"

IMAGE_FEATURES = "features"
IMAGE_MASK = "mask"


class ContainerError(RepriError):
    """Base class for container format violations."""


class BadMagicError(ContainerError):
    pass


class UnsupportedVersionError(ContainerError):
    pass


class UnsupportedDtypeError(ContainerError):
    pass


class TruncatedPayloadError(ContainerError):
    pass


class DuplicateNameError(ContainerError):
    pass


class BadHeaderError(ContainerError):
    """Malformed header fields not covered by a more specific error."""


class SchemaError(ContainerError):
    """A well-formed container does not carry the expected arrays."""


class BadDimsError(RepriError):
    """Downsampling target exceeds the source resolution."""


class InsufficientImagesError(RepriError):
    """A class has fewer images than an episode needs."""


@dataclass(frozen=True)
class ContainerFile:
    """Parsed container: an ordered name -> array mapping."""

    arrays: dict

    @property
    def names(self):
        return list(self.arrays)


def write_container(path, arrays) -> None:
    """Write named arrays (float32 or uint8) atomically to ``path``."""
    path = Path(path)
    chunks = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    seen = set()
    for name, arr in arrays.items():
        if name in seen:
            raise DuplicateNameError(f"array name {name!r} repeated")
        seen.add(name)
        arr = np.asarray(arr)
        if arr.dtype not in _DTYPE_TO_CODE:
            raise UnsupportedDtypeError(f"array {name!r} has dtype {arr.dtype}, need float32 or uint8")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<BB", _DTYPE_TO_CODE[arr.dtype], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    tmp = path.with_name(f".{path.name}.tmp-{os.getpid()}")
    tmp.write_bytes(b"".join(chunks))
    os.replace(tmp, path)


class _Cursor:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if n > len(self.data) - self.pos:
            raise TruncatedPayloadError(
                f"file ends inside {what} (needed {n} bytes at offset {self.pos})"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_container(path) -> ContainerFile:
    """Parse a container file; every rejection raises a ContainerError subclass."""
    return parse_container(Path(path).read_bytes())


def parse_container(data: bytes) -> ContainerFile:
    cur = _Cursor(data)
    if cur.take(4, "magic") != MAGIC:
        raise BadMagicError("not a task container (bad magic bytes)")
    (version,) = cur.unpack("<I", "version")
    if version != VERSION:
        raise UnsupportedVersionError(f"container version {version} not supported (expected {VERSION})")
    (count,) = cur.unpack("<I", "array count")
    arrays: dict = {}
    for _ in range(count):
        (name_len,) = cur.unpack("<H", "name length")
        raw_name = cur.take(name_len, "array name")
        try:
            name = raw_name.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise BadHeaderError("array name is not valid UTF-8") from exc
        if name in arrays:
            raise DuplicateNameError(f"array name {name!r} repeated")
        (dtype_code, ndim) = cur.unpack("<BB", "dtype/ndim")
        if dtype_code not in _CODE_TO_DTYPE:
            raise UnsupportedDtypeError(f"unknown dtype code {dtype_code}")
        dtype = _CODE_TO_DTYPE[dtype_code]
        dims = cur.unpack(f"<{ndim}Q", "dims")
        n_items = math.prod(dims)  # arbitrary-precision: huge dims cannot overflow
        payload_len = n_items * dtype.itemsize
        payload = cur.take(payload_len, f"payload of {name!r}")
        arrays[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
    if cur.pos != len(data):
        raise BadHeaderError(f"{len(data) - cur.pos} trailing bytes after the last declared array")
    return ContainerFile(arrays=arrays)


def write_task_container(path, task: TaskInstance, class_id: int | None = None) -> None:
    """Store one full episode (supports, query, optional truth) in a container."""
    arrays = {
        TASK_SUPPORT_FEATURES: np.stack(
            [f.values.astype(np.float32) for f, _ in task.supports]
        ),
        TASK_SUPPORT_MASKS: np.stack([m.values for _, m in task.supports]),
        TASK_QUERY_FEATURES: task.query.values.astype(np.float32),
    }
    if task.query_gt is not None:
        arrays[TASK_QUERY_MASK] = task.query_gt.values
    if class_id is not None:
        arrays[TASK_CLASS_ID] = np.array([class_id], dtype=np.uint8)
    write_container(path, arrays)


def read_task_container(path):
    """Load an episode; returns ``(task, class_id or None)``."""
    container = read_container(path)
    arrays = container.arrays
    for required in (TASK_SUPPORT_FEATURES, TASK_SUPPORT_MASKS, TASK_QUERY_FEATURES):
        if required not in arrays:
            raise SchemaError(f"task container lacks array {required!r}")
    feats = arrays[TASK_SUPPORT_FEATURES]
    masks = arrays[TASK_SUPPORT_MASKS]
    if feats.ndim != 4 or masks.ndim != 3 or arrays[TASK_QUERY_FEATURES].ndim != 3:
        raise SchemaError("task container arrays have unexpected ranks")
    if feats.shape[0] != masks.shape[0]:
        raise SchemaError("support feature and mask counts differ")
    try:
        supports = tuple(
            (FeatureMap(feats[i]), PixelMask(masks[i])) for i in range(feats.shape[0])
        )
        query_gt = None
        if TASK_QUERY_MASK in arrays:
            query_gt = PixelMask(arrays[TASK_QUERY_MASK])
        task = TaskInstance(
            supports=supports, query=FeatureMap(arrays[TASK_QUERY_FEATURES]), query_gt=query_gt
        )
    except InvariantError as exc:
        raise SchemaError(f"task container contents invalid: {exc}") from exc
    class_id = None
    if TASK_CLASS_ID in arrays:
        if arrays[TASK_CLASS_ID].size != 1:
            raise SchemaError("class_id array must hold exactly one value")
        class_id = int(arrays[TASK_CLASS_ID].reshape(-1)[0])
    return task, class_id


def write_image_container(path, features, mask, class_id: int | None = None) -> None:
    """Store one image's feature map and feature-resolution mask."""
    arrays = {
        IMAGE_FEATURES: np.asarray(features, dtype=np.float32),
        IMAGE_MASK: np.asarray(mask, dtype=np.uint8),
    }
    if class_id is not None:
        arrays[TASK_CLASS_ID] = np.array([class_id], dtype=np.uint8)
    write_container(path, arrays)


def read_image_container(path):
    """Load one image's ``(FeatureMap, PixelMask)`` pair."""
    arrays = read_container(path).arrays
    for required in (IMAGE_FEATURES, IMAGE_MASK):
        if required not in arrays:
            raise SchemaError(f"image container lacks array {required!r}")
    try:
        return FeatureMap(arrays[IMAGE_FEATURES]), PixelMask(arrays[IMAGE_MASK])
    except InvariantError as exc:
        raise SchemaError(f"image container contents invalid: {exc}") from exc


# ---------------------------------------------------------------------------
# mask downsampling


def _overlap_lengths(n_target: int, n_source: int) -> np.ndarray:
    """Integer overlaps of fractional source windows with source cells.

    All coordinates are scaled by ``n_target`` so every boundary is an
    integer: target cell ``i`` spans ``[i*n_source, (i+1)*n_source)`` and
    source cell ``r`` spans ``[r*n_target, (r+1)*n_target)``.  Each row
    sums to ``n_source`` exactly.
    """
    out = np.zeros((n_target, n_source), dtype=np.int64)
    for i in range(n_target):
        lo, hi = i * n_source, (i + 1) * n_source
        for r in range(lo // n_target, min(n_source, -(-hi // n_target))):
            out[i, r] = max(0, min(hi, (r + 1) * n_target) - max(lo, r * n_target))
    return out


def downsample_mask(full, target) -> PixelMask:
    """Area-average a binary mask onto a coarser grid, then threshold at 0.5.

    The fractional-window average is evaluated in exact integer
    arithmetic, so the tie rule (pooled value exactly 0.5 counts as
    foreground) holds even when the resolution ratio is not a whole
    number; this preserves the foreground-proportion signal better than
    nearest-neighbour.
    """
    full = np.asarray(full)
    if full.ndim != 2:
        raise BadDimsError(f"mask must be 2-D, got shape {full.shape}")
    th, tw = target
    h0, w0 = full.shape
    if not (1 <= th <= h0 and 1 <= tw <= w0):
        raise BadDimsError(f"target {target} must be within source {full.shape} and positive")
    rows = _overlap_lengths(th, h0)
    cols = _overlap_lengths(tw, w0)
    # pooled average = weighted sum / (h0 * w0); threshold >= 0.5 exactly
    weighted = rows @ full.astype(np.int64) @ cols.T
    return PixelMask((2 * weighted >= h0 * w0).astype(np.uint8))


# ---------------------------------------------------------------------------
# seeded randomness (Philox4x64-10, splitmix64 sub-stream derivation)

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def derive_seed(*parts: int) -> int:
    """Fold integers into one 64-bit sub-stream key, order-sensitive."""
    acc = 0x243F6A8885A308D3
    for part in parts:
        acc = _splitmix64(acc ^ (int(part) & _MASK64))
    return acc


def rng_from(*parts: int) -> np.random.Generator:
    """Independent Philox stream keyed by the given integers."""
    return np.random.Generator(np.random.Philox(key=derive_seed(*parts)))


# ---------------------------------------------------------------------------
# synthetic tasks


@dataclass(frozen=True)
class SynthConfig:
    """Settings of the rectangle-foreground synthetic task generator.

    Pixel features are a region mean (class-specific unit direction for
    the foreground, a background direction at ``fg_mean_scale`` right
    angles from it) plus isotropic Gaussian noise; foreground regions
    are axis-aligned rectangles, so ground-truth proportions are exact.

    ``support_query_shift`` rotates the query's foreground direction
    away from the class direction and biases the query's foreground
    proportion upwards, creating a controlled mismatch between support
    and query distributions.  At shift 0 supports and query are drawn
    from the same distribution.

    ``distractor_rate`` > 0 additionally paints a background rectangle
    (per image, covering roughly that share of pixels) whose mean sits
    only ``distractor_angle`` right angles away from that image's
    foreground direction, in a plane drawn per image: label-consistent
    confusable clutter like the class-correlated context of natural
    scenes.  ``support_jitter`` rotates every support's foreground
    direction independently, so single supports are noisy samples of
    the class and averaging over shots genuinely helps.
    """

    height: int = 16
    width: int = 16
    channels: int = 16
    fg_mean_scale: float = 1.0
    noise_sigma: float = 0.25
    fg_proportion_range: tuple = (0.1, 0.4)
    support_query_shift: float = 0.0
    k: int = 1
    n_classes: int = 8
    class_seed: int = 0
    distractor_rate: float = 0.0
    distractor_angle: float = 0.5
    support_jitter: float = 0.0

    def __post_init__(self) -> None:
        if min(self.height, self.width) < 1 or self.channels < 3:
            raise InvariantError("need height, width >= 1 and channels >= 3")
        lo, hi = self.fg_proportion_range
        if not (0.0 < lo < hi < 1.0):
            raise InvariantError(f"fg_proportion_range must satisfy 0 < lo < hi < 1, got {(lo, hi)}")
        if not (self.noise_sigma > 0.0):
            raise InvariantError("noise_sigma must be positive")
        if not (0.0 <= self.fg_mean_scale <= 2.0):
            raise InvariantError("fg_mean_scale must lie in [0, 2] (right-angle units)")
        if not (0.0 <= self.support_query_shift <= 1.0):
            raise InvariantError("support_query_shift must lie in [0, 1]")
        if not (0.0 <= self.distractor_rate < 1.0):
            raise InvariantError("distractor_rate must lie in [0, 1)")
        if not (0.0 <= self.distractor_angle <= 2.0):
            raise InvariantError("distractor_angle must lie in [0, 2] (right-angle units)")
        if not (0.0 <= self.support_jitter <= 1.0):
            raise InvariantError("support_jitter must lie in [0, 1]")
        if self.k < 1 or self.n_classes < 1:
            raise InvariantError("k and n_classes must be >= 1")


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _orthogonal_unit(rng: np.random.Generator, anchor: np.ndarray) -> np.ndarray:
    while True:
        u = rng.standard_normal(anchor.shape[0])
        u -= u.dot(anchor) * anchor
        norm = np.linalg.norm(u)
        if norm > 1e-9:
            return u / norm


def class_directions(cfg: SynthConfig, class_id: int):
    """Deterministic (background, foreground) unit directions of one class."""
    rng = rng_from(cfg.class_seed, 101, class_id)
    mu_b = _unit(rng.standard_normal(cfg.channels))
    perp = _orthogonal_unit(rng, mu_b)
    theta = cfg.fg_mean_scale * math.pi / 2.0
    mu_f = math.cos(theta) * mu_b + math.sin(theta) * perp
    return mu_b, mu_f


def _rotate_towards(mu: np.ndarray, amount: float, rng) -> np.ndarray:
    """Rotate a unit vector by ``amount`` right angles within a random plane."""
    if amount <= 0.0:
        return mu
    away = _orthogonal_unit(rng, mu)
    theta = amount * math.pi / 2.0
    return math.cos(theta) * mu + math.sin(theta) * away


def _rectangle(h, w, proportion, rng):
    """(top, left, height, width) of a rectangle covering ~proportion."""
    rh = int(np.clip(round(h * math.sqrt(proportion)), 1, h))
    rw = int(np.clip(round(w * math.sqrt(proportion)), 1, w))
    top = int(rng.integers(0, h - rh + 1))
    left = int(rng.integers(0, w - rw + 1))
    return top, left, rh, rw


def _paint_image(cfg, mu_f, mu_b, fg_proportion, rng):
    """Feature map and mask of one image: background canvas, an optional
    distractor rectangle (labelled background, direction drawn per
    image), the foreground rectangle painted last (it wins overlaps)."""
    region = np.zeros((cfg.height, cfg.width), dtype=np.intp)
    if cfg.distractor_rate > 0.0:
        t, l, h, w = _rectangle(cfg.height, cfg.width, cfg.distractor_rate, rng)
        region[t : t + h, l : l + w] = 1
    t, l, h, w = _rectangle(cfg.height, cfg.width, fg_proportion, rng)
    region[t : t + h, l : l + w] = 2
    mu_d = _rotate_towards(mu_f, cfg.distractor_angle, rng) if cfg.distractor_rate > 0.0 else mu_b
    means = np.stack([mu_b, mu_d, mu_f])
    feats = means[region] + cfg.noise_sigma * rng.standard_normal((cfg.height, cfg.width, cfg.channels))
    return feats, (region == 2).astype(np.uint8)


def synth_episode(cfg: SynthConfig, seed: int):
    """One deterministic synthetic episode; returns ``(class_id, task)``.

    Streams are keyed so the query and the first supports are identical
    across shot counts: a 1-shot task's support is byte-equal to the
    first support of the matching 5-shot task.
    """
    rng_task = rng_from(seed, 1)
    rng_support = rng_from(seed, 2)
    class_id = int(rng_task.integers(cfg.n_classes))
    mu_b, mu_f = class_directions(cfg, class_id)

    shift = cfg.support_query_shift
    mu_f_query = _rotate_towards(mu_f, shift, rng_task)
    lo, hi = cfg.fg_proportion_range
    p_query = min(float(rng_task.uniform(lo, hi)) + shift * (hi - lo), 0.95)
    query_feats, query_mask = _paint_image(cfg, mu_f_query, mu_b, p_query, rng_task)

    supports = []
    for _ in range(cfg.k):
        mu_f_k = _rotate_towards(mu_f, cfg.support_jitter, rng_support)
        p_k = float(rng_support.uniform(lo, hi))
        feats, mask = _paint_image(cfg, mu_f_k, mu_b, p_k, rng_support)
        supports.append((FeatureMap(feats), PixelMask(mask)))

    task = TaskInstance(
        supports=tuple(supports),
        query=FeatureMap(query_feats),
        query_gt=PixelMask(query_mask),
    )
    return class_id, task


def synth_task(cfg: SynthConfig, seed: int) -> TaskInstance:
    """The task of :func:`synth_episode` without its class label."""
    return synth_episode(cfg, seed)[1]


# ---------------------------------------------------------------------------
# dataset index and episode sampling


@dataclass(frozen=True)
class IndexRecord:
    class_id: int
    image_id: str
    path: str


@dataclass(frozen=True)
class DatasetIndex:
    """Image catalogue: class ids, image ids, and container paths."""

    root: str
    records: tuple

    def by_class(self) -> dict:
        out: dict = {}
        for rec in self.records:
            out.setdefault(rec.class_id, []).append(rec)
        return out

    def resolve(self, record: IndexRecord) -> Path:
        return Path(self.root) / record.path


def write_index(path, records) -> None:
    lines = [f"{r.class_id}\t{r.image_id}\t{r.path}\n" for r in records]
    Path(path).write_text("".join(lines), encoding="utf-8")


def load_index(path, validate: bool = True) -> DatasetIndex:
    """Parse an index file; with ``validate`` every referenced container
    must exist and parse."""
    path = Path(path)
    records = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise InvariantError(f"{path}:{lineno}: expected class_id<TAB>image_id<TAB>path")
        records.append(IndexRecord(class_id=int(parts[0]), image_id=parts[1], path=parts[2]))
    index = DatasetIndex(root=str(path.parent), records=tuple(records))
    if validate:
        for rec in index.records:
            target = index.resolve(rec)
            if not target.exists():
                raise InvariantError(f"indexed container missing: {target}")
            read_container(target)
    return index


def sample_episodes(index: DatasetIndex, k: int, n_tasks: int, seed: int):
    """Sample ``n_tasks`` episodes: per task a uniform class pick, then
    ``k + 1`` distinct images of it (last one is the query).

    Returns a list of ``(class_id, TaskInstance)`` pairs.
    """
    grouped = index.by_class()
    class_ids = sorted(grouped)
    for cid in class_ids:
        if len(grouped[cid]) < k + 1:
            raise InsufficientImagesError(
                f"class {cid} has {len(grouped[cid])} images, needs >= {k + 1}"
            )
    episodes = []
    for i in range(n_tasks):
        rng = rng_from(seed, 3, i)
        cid = class_ids[int(rng.integers(len(class_ids)))]
        records = grouped[cid]
        picks = rng.choice(len(records), size=k + 1, replace=False)
        images = [read_image_container(index.resolve(records[int(p)])) for p in picks]
        supports = tuple((f, m) for f, m in images[:k])
        query_feats, query_mask = images[k]
        episodes.append(
            (cid, TaskInstance(supports=supports, query=query_feats, query_gt=query_mask))
        )
    return episodes
