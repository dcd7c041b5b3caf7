"""Paired two-modality data with known shared and modality-unique latents.

Each modality observes ``g_m([z_s, u_m]) + noise`` where ``g_m`` is a fixed
random tanh MLP. Labels are sign patterns of the first (up to) three shared
coordinates, so they only depend on information both modalities carry.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"DCUR"
VERSION = 1
HEADER = struct.Struct("<4sIII16x")  # magic, version, n_sections, n_samples -> 32 bytes
SECTION = struct.Struct("<BII")  # tag, rows, cols
SECTION_ORDER = ("X1", "X2", "z_s", "u1", "u2", "labels")
TAGS = {name: i + 1 for i, name in enumerate(SECTION_ORDER)}
U32_MAX = 2**32 - 1


class DatasetFormatError(ValueError):
    pass


class BadMagicError(DatasetFormatError):
    pass


class VersionMismatchError(DatasetFormatError):
    pass


class TruncatedFileError(DatasetFormatError):
    pass


class DimensionOverflowError(DatasetFormatError):
    pass


@dataclass(frozen=True)
class SyntheticSpec:
    d_shared: int = 8
    d_u1: int = 4
    d_u2: int = 4
    d_x1: int = 64
    d_x2: int = 64
    map_depth: int = 2
    noise_std: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for name in ("d_shared", "d_u1", "d_u2", "d_x1", "d_x2", "map_depth"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_x1 < self.d_shared + self.d_u1 or self.d_x2 < self.d_shared + self.d_u2:
            raise ValueError("observed dims must be >= d_shared + d_u for an injective mixing")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")


@dataclass
class PairedDataset:
    """Observations are float32; latents are for evaluation only."""

    X1: np.ndarray
    X2: np.ndarray
    z_s: np.ndarray
    u1: np.ndarray
    u2: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        n = self.X1.shape[0]
        for name in SECTION_ORDER:
            if getattr(self, name).shape[0] != n:
                raise ValueError(f"{name} has {getattr(self, name).shape[0]} rows, expected {n}")

    def __len__(self):
        return self.X1.shape[0]

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1

    def views(self) -> tuple[np.ndarray, np.ndarray]:
        """The only arrays training code is allowed to see."""
        return self.X1, self.X2

    def subset(self, idx) -> "PairedDataset":
        return PairedDataset(*(getattr(self, n)[idx] for n in SECTION_ORDER))

    def equals(self, other: "PairedDataset") -> bool:
        return all(
            getattr(self, n).dtype == getattr(other, n).dtype
            and np.array_equal(getattr(self, n), getattr(other, n))
            for n in SECTION_ORDER
        )


def random_mixing(rng: np.random.Generator, d_in: int, d_out: int, depth: int) -> list[np.ndarray]:
    """Weights of a ``depth``-layer map ``d_in -> d_out`` (tanh between layers)."""
    mats = [rng.normal(size=(d_out, d_in)) / np.sqrt(d_in)]
    for _ in range(depth - 1):
        mats.append(rng.normal(size=(d_out, d_out)) / np.sqrt(d_out))
    return mats


def planted_block_mixing(spec: SyntheticSpec, modality: int = 1, rng: np.random.Generator | None = None,
                         block: int | None = None) -> list[np.ndarray]:
    """Block-structured mixing: the unique latent reaches only input coords
    ``0..block-1``; the shared latent reaches only the remaining coords."""
    rng = rng or np.random.default_rng(spec.seed + 7919)
    d_u = spec.d_u1 if modality == 1 else spec.d_u2
    d_x = spec.d_x1 if modality == 1 else spec.d_x2
    block = block or d_u
    if not d_u <= block < d_x - spec.d_shared + 1:
        raise ValueError("block must hold the unique latent and leave room for the shared one")
    d_in = spec.d_shared + d_u
    mats = []
    for layer in range(spec.map_depth):
        src_s, src_u = (spec.d_shared, d_u) if layer == 0 else (d_x - block, block)
        src_dim = d_in if layer == 0 else d_x
        W = np.zeros((d_x, src_dim))
        # rows 0..block-1 read the unique coords, rows block.. read the shared coords
        if layer == 0:
            W[:block, spec.d_shared:] = rng.normal(size=(block, src_u)) / np.sqrt(src_u)
            W[block:, :spec.d_shared] = rng.normal(size=(d_x - block, src_s)) / np.sqrt(src_s)
        else:
            W[:block, :block] = rng.normal(size=(block, block)) / np.sqrt(block)
            W[block:, block:] = rng.normal(size=(d_x - block, d_x - block)) / np.sqrt(d_x - block)
        mats.append(W)
    return mats


def apply_mixing(mats: list[np.ndarray], h: np.ndarray) -> np.ndarray:
    for i, W in enumerate(mats):
        if i:
            h = np.tanh(h)
        h = h @ W.T
    return h


def default_mixing(spec: SyntheticSpec) -> tuple[list[np.ndarray], list[np.ndarray]]:
    rng = np.random.default_rng([spec.seed, 1])
    g1 = random_mixing(rng, spec.d_shared + spec.d_u1, spec.d_x1, spec.map_depth)
    g2 = random_mixing(rng, spec.d_shared + spec.d_u2, spec.d_x2, spec.map_depth)
    return g1, g2


def sign_labels(z_s: np.ndarray) -> np.ndarray:
    k = min(3, z_s.shape[1])
    bits = (z_s[:, :k] > 0).astype(np.int32)
    return (bits * (1 << np.arange(k, dtype=np.int32))).sum(axis=1).astype(np.int32)


def generate(spec: SyntheticSpec, n: int, mixing=None) -> PairedDataset:
    """Draw ``n`` paired samples. ``mixing`` optionally overrides ``(g1, g2)``
    as two lists of weight matrices (applied with tanh between layers)."""
    if n < 2:
        raise ValueError("n must be >= 2")
    g1, g2 = mixing if mixing is not None else default_mixing(spec)
    for mats, d_in, d_x in ((g1, spec.d_shared + spec.d_u1, spec.d_x1),
                            (g2, spec.d_shared + spec.d_u2, spec.d_x2)):
        if mats[0].shape[1] != d_in or mats[-1].shape[0] != d_x:
            raise ValueError("mixing override does not match the SyntheticSpec dims")
    rng = np.random.default_rng([spec.seed, 2])
    z_s = rng.standard_normal((n, spec.d_shared))
    u1 = rng.standard_normal((n, spec.d_u1))
    u2 = rng.standard_normal((n, spec.d_u2))
    X1 = apply_mixing(g1, np.hstack([z_s, u1]))
    X2 = apply_mixing(g2, np.hstack([z_s, u2]))
    if spec.noise_std > 0:
        X1 = X1 + spec.noise_std * rng.standard_normal(X1.shape)
        X2 = X2 + spec.noise_std * rng.standard_normal(X2.shape)
    f32 = np.float32
    return PairedDataset(X1.astype(f32), X2.astype(f32), z_s.astype(f32), u1.astype(f32),
                         u2.astype(f32), sign_labels(z_s))


# ---------------------------------------------------------------- augmentation

@dataclass(frozen=True)
class AugmentPolicy:
    noise_std: float = 0.0
    mask_fraction: float = 0.0
    scale_range: tuple[float, float] = (1.0, 1.0)
    flip_sign_prob: float = 0.0

    def __post_init__(self):
        lo, hi = self.scale_range
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if not 0 <= self.mask_fraction < 1:
            raise ValueError("mask_fraction must be in [0, 1)")
        if not 0 < lo <= hi:
            raise ValueError("scale_range needs 0 < lo <= hi")
        if not 0 <= self.flip_sign_prob <= 1:
            raise ValueError("flip_sign_prob must be in [0, 1]")
        object.__setattr__(self, "scale_range", (float(lo), float(hi)))


def augment_batch(X: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    """Augment each row independently: noise, masking, scaling, sign flip."""
    X = np.array(X, dtype=np.float64)
    n, d = X.shape
    if policy.noise_std > 0:
        X += policy.noise_std * rng.standard_normal((n, d))
    k = int(np.floor(policy.mask_fraction * d))
    if k:
        cols = np.argsort(rng.random((n, d)), axis=1)[:, :k]
        X[np.arange(n)[:, None], cols] = 0.0
    lo, hi = policy.scale_range
    if hi > lo:
        X *= rng.uniform(lo, hi, size=(n, 1))
    elif lo != 1.0:
        X *= lo
    if policy.flip_sign_prob > 0:
        flip = rng.random(n) < policy.flip_sign_prob
        X[flip] *= -1.0
    return X


def augment(x: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    x = np.asarray(x)
    return augment_batch(x.reshape(1, -1), policy, rng).reshape(x.shape)


# ----------------------------------------------------------------- file format

def expected_file_size(ds: PairedDataset) -> int:
    size = HEADER.size
    for name in SECTION_ORDER:
        arr = _as_2d(getattr(ds, name))
        size += SECTION.size + arr.size * 4
    return size


def _as_2d(a: np.ndarray) -> np.ndarray:
    return a.reshape(len(a), -1)


def save_dataset(ds: PairedDataset, path) -> None:
    chunks = [HEADER.pack(MAGIC, VERSION, len(SECTION_ORDER), len(ds))]
    for name in SECTION_ORDER:
        arr = _as_2d(getattr(ds, name))
        rows, cols = arr.shape
        if rows > U32_MAX or cols > U32_MAX:
            raise DimensionOverflowError(f"{name}: {rows}x{cols} does not fit in u32 dims")
        dtype = "<i4" if name == "labels" else "<f4"
        chunks.append(SECTION.pack(TAGS[name], rows, cols))
        chunks.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_dataset(path) -> PairedDataset:
    """Parse a whole file into memory and validate before building anything."""
    buf = Path(path).read_bytes()
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"{path}: not a DCUR dataset (bad magic)")
    if len(buf) < HEADER.size:
        raise TruncatedFileError(f"{path}: header truncated")
    _, version, n_sections, n_samples = HEADER.unpack_from(buf, 0)
    if version != VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {VERSION}")
    if n_sections != len(SECTION_ORDER):
        raise DatasetFormatError(f"{path}: {n_sections} sections, expected {len(SECTION_ORDER)}")
    pos = HEADER.size
    arrays = {}
    for name in SECTION_ORDER:
        if pos + SECTION.size > len(buf):
            raise TruncatedFileError(f"{path}: section header for {name} truncated")
        tag, rows, cols = SECTION.unpack_from(buf, pos)
        pos += SECTION.size
        if tag != TAGS[name]:
            raise DatasetFormatError(f"{path}: expected section {name} (tag {TAGS[name]}), got tag {tag}")
        if rows != n_samples:
            raise DatasetFormatError(f"{path}: section {name} has {rows} rows, header says {n_samples}")
        nbytes = rows * cols * 4
        if nbytes >= 2**32:  # a section payload must be addressable with 32-bit sizes
            raise DimensionOverflowError(f"{path}: section {name} declares {rows}x{cols}")
        if pos + nbytes > len(buf):
            raise TruncatedFileError(f"{path}: payload of {name} truncated")
        dtype = "<i4" if name == "labels" else "<f4"
        arr = np.frombuffer(buf, dtype=dtype, count=rows * cols, offset=pos).reshape(rows, cols)
        pos += nbytes
        arrays[name] = arr.astype(np.int32 if name == "labels" else np.float32)
    if pos != len(buf):
        raise DatasetFormatError(f"{path}: {len(buf) - pos} trailing bytes")
    arrays["labels"] = arrays["labels"].reshape(-1)
    return PairedDataset(**arrays)
