"""Unified embedding layer: 2-D images and 3-D volumes to token sequences.

Patches are enumerated in lexicographic grid order and flattened in
(depth, row, col, channel) order. A CLS token is prepended, the leading rows of
the modality's positional table are added, and sequences of differing lengths
are collated into a zero-padded batch with a binary validity mask.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass

import numpy as np

from .errors import CapacityError, InputError, ShapeError
from .numerics import matmul


class Modality(enum.IntEnum):
    TWO_D = 0
    THREE_D = 1

    @classmethod
    def parse(cls, value) -> "Modality":
        if isinstance(value, Modality):
            return value
        key = str(value).lower().replace("-", "_")
        aliases = {"2d": cls.TWO_D, "two_d": cls.TWO_D, "3d": cls.THREE_D, "three_d": cls.THREE_D}
        if key not in aliases:
            raise InputError(f"unknown modality {value!r}")
        return aliases[key]


@dataclass(frozen=True)
class PatchSpec2D:
    patch_h: int
    patch_w: int
    channels: int
    max_h: int
    max_w: int

    def __post_init__(self):
        vals = (self.patch_h, self.patch_w, self.channels, self.max_h, self.max_w)
        if min(vals) <= 0:
            raise InputError(f"PatchSpec2D fields must be positive: {vals}")
        if self.max_h % self.patch_h or self.max_w % self.patch_w:
            raise InputError("PatchSpec2D maxima must be divisible by the patch size")

    @property
    def patch_dims(self):
        return (self.patch_h, self.patch_w)

    @property
    def max_dims(self):
        return (self.max_h, self.max_w)

    @property
    def patch_len(self) -> int:
        return self.patch_h * self.patch_w * self.channels

    @property
    def max_tokens(self) -> int:
        return (self.max_h * self.max_w) // (self.patch_h * self.patch_w)


@dataclass(frozen=True)
class PatchSpec3D:
    patch_d: int
    patch_h: int
    patch_w: int
    channels: int
    max_d: int
    max_h: int
    max_w: int

    def __post_init__(self):
        vals = (self.patch_d, self.patch_h, self.patch_w, self.channels,
                self.max_d, self.max_h, self.max_w)
        if min(vals) <= 0:
            raise InputError(f"PatchSpec3D fields must be positive: {vals}")
        if self.max_d % self.patch_d or self.max_h % self.patch_h or self.max_w % self.patch_w:
            raise InputError("PatchSpec3D maxima must be divisible by the patch size")

    @property
    def patch_dims(self):
        return (self.patch_d, self.patch_h, self.patch_w)

    @property
    def max_dims(self):
        return (self.max_d, self.max_h, self.max_w)

    @property
    def patch_len(self) -> int:
        return self.patch_d * self.patch_h * self.patch_w * self.channels

    @property
    def max_tokens(self) -> int:
        return (self.max_d * self.max_h * self.max_w) // (self.patch_d * self.patch_h * self.patch_w)


@dataclass(frozen=True, eq=False)
class EmbeddingWeights:
    proj2d: np.ndarray  # (patch_len2d, d)
    proj3d: np.ndarray  # (patch_len3d, d)
    pos2d: np.ndarray   # (N2_max + 1, d)
    pos3d: np.ndarray   # (N3_max + 1, d)
    cls: np.ndarray     # (d,)

    def astype(self, dtype) -> "EmbeddingWeights":
        return EmbeddingWeights(*(np.ascontiguousarray(a, dtype=dtype) for a in self.arrays()))

    def arrays(self):
        return (self.proj2d, self.proj3d, self.pos2d, self.pos3d, self.cls)

    def with_3d(self, proj3d, pos3d) -> "EmbeddingWeights":
        return EmbeddingWeights(self.proj2d, proj3d, self.pos2d, pos3d, self.cls)

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays())


@dataclass(eq=False)
class TokenSequence:
    tokens: np.ndarray  # (valid_len, d)
    valid_len: int
    modality: Modality


@dataclass(eq=False)
class StandardizedBatch:
    tokens: np.ndarray     # (n, L_max, d)
    mask: np.ndarray       # (n, L_max), uint8
    valid_lens: np.ndarray  # (n,)

    @property
    def n(self) -> int:
        return self.tokens.shape[0]

    @property
    def L_max(self) -> int:
        return self.tokens.shape[1]

    def unpad(self) -> list[np.ndarray]:
        return [self.tokens[i, : int(v)].copy() for i, v in enumerate(self.valid_lens)]


def patchify_order(dims, patch_dims) -> list[tuple[int, ...]]:
    """Patch-grid coordinates in lexicographic (depth, row, col) order."""
    if len(dims) != len(patch_dims):
        raise ShapeError("dims and patch_dims differ in length")
    grid = []
    for size, p in zip(dims, patch_dims):
        if p <= 0 or size % p:
            raise InputError(f"dimension {size} is not divisible by patch size {p}")
        grid.append(range(size // p))
    return list(itertools.product(*grid))


def extract_patches(x: np.ndarray, patch_dims) -> np.ndarray:
    """Rows of flattened patches, ordered as ``patchify_order``.

    ``x`` has shape ``spatial... x C``; each row is the patch flattened in
    (spatial..., channel) order.
    """
    k = len(patch_dims)
    spatial, c = x.shape[:k], x.shape[k]
    grid = [s // p for s, p in zip(spatial, patch_dims)]
    # (g0, p0, g1, p1, ..., C) -> (g0, g1, ..., p0, p1, ..., C)
    split = x.reshape(*[v for g, p in zip(grid, patch_dims) for v in (g, p)], c)
    order = list(range(0, 2 * k, 2)) + list(range(1, 2 * k, 2)) + [2 * k]
    patches = split.transpose(order)
    return np.ascontiguousarray(patches.reshape(int(np.prod(grid)), -1))


def _check_input(x, spec, name):
    k = len(spec.patch_dims)
    if x.ndim != k + 1:
        raise InputError(f"{name} expects a {k + 1}-D array (spatial..., C), got shape {x.shape}")
    if x.shape[-1] != spec.channels:
        raise InputError(f"{name}: expected {spec.channels} channels, got {x.shape[-1]}")
    for size, p, mx in zip(x.shape[:k], spec.patch_dims, spec.max_dims):
        if size <= 0 or size % p:
            raise InputError(f"{name}: size {size} is not divisible by patch size {p}")
        if size > mx:
            raise InputError(f"{name}: size {size} exceeds configured maximum {mx}")


def _embed(x, spec, proj, pos, cls, modality):
    patches = extract_patches(np.ascontiguousarray(x, dtype=proj.dtype), spec.patch_dims)
    n = patches.shape[0]
    tokens = np.empty((n + 1, proj.shape[1]), dtype=proj.dtype)
    tokens[0] = cls
    tokens[1:] = matmul(patches, proj)
    tokens += pos[: n + 1]
    return TokenSequence(tokens, n + 1, modality), patches


def embed_2d(image, spec: PatchSpec2D, w: EmbeddingWeights) -> TokenSequence:
    image = np.asarray(image)
    _check_input(image, spec, "embed_2d")
    return _embed(image, spec, w.proj2d, w.pos2d, w.cls, Modality.TWO_D)[0]


def embed_3d(volume, spec: PatchSpec3D, w: EmbeddingWeights) -> TokenSequence:
    volume = np.asarray(volume)
    _check_input(volume, spec, "embed_3d")
    return _embed(volume, spec, w.proj3d, w.pos3d, w.cls, Modality.THREE_D)[0]


def embed_with_patches(x, modality, spec2d, spec3d, w):
    """Embed and also return the flattened patch rows (needed for 3D-embedding gradients)."""
    x = np.asarray(x)
    if Modality.parse(modality) is Modality.TWO_D:
        _check_input(x, spec2d, "embed_2d")
        return _embed(x, spec2d, w.proj2d, w.pos2d, w.cls, Modality.TWO_D)
    _check_input(x, spec3d, "embed_3d")
    return _embed(x, spec3d, w.proj3d, w.pos3d, w.cls, Modality.THREE_D)


def standardize_batch(seqs: list[TokenSequence], L_max: int | None = None) -> StandardizedBatch:
    """Zero-pad sequences to ``L_max`` (default: longest sequence) with a validity mask."""
    if not seqs:
        raise InputError("standardize_batch needs at least one sequence")
    longest = max(s.valid_len for s in seqs)
    if L_max is None:
        L_max = longest
    if longest > L_max:
        raise CapacityError(f"sequence of length {longest} exceeds L_max={L_max}")
    d = seqs[0].tokens.shape[1]
    dtype = seqs[0].tokens.dtype
    tokens = np.zeros((len(seqs), L_max, d), dtype=dtype)
    mask = np.zeros((len(seqs), L_max), dtype=np.uint8)
    lens = np.empty(len(seqs), dtype=np.int64)
    for i, s in enumerate(seqs):
        if s.tokens.shape != (s.valid_len, d):
            raise ShapeError(f"sequence {i} has tokens {s.tokens.shape}, valid_len {s.valid_len}")
        tokens[i, : s.valid_len] = s.tokens
        mask[i, : s.valid_len] = 1
        lens[i] = s.valid_len
    return StandardizedBatch(tokens, mask, lens)


def default_L_max(spec2d: PatchSpec2D, spec3d: PatchSpec3D) -> int:
    return max(spec2d.max_tokens, spec3d.max_tokens) + 1
