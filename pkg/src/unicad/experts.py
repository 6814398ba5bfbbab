"""Task experts: low-rank Q/V matrices per block plus a linear head.

Experts are the unit of sharing. They are padded with zero rows/columns to a
common rank before batching, which leaves their contribution bit-for-bit
unchanged because the extra terms are exact zeros added at the end of an
ascending-order reduction.
"""

from __future__ import annotations

import enum
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .backbone import INIT_STD, Backbone
from .codec import Reader, Writer
from .errors import (CodecError, CompatibilityError, ConflictError, ContractError,
                     InputError, NotFoundError, ShapeError)
from .prng import Xoshiro, mix_seed
from .uel import Modality

UCEX_MAGIC = b"UCEX"
UCEX_VERSION = 1
FLAG_EMBED3D = 1 << 0
FLAG_FINGERPRINT = 1 << 1
BYTES_PER_PARAM = 4


class HeadMode(enum.IntEnum):
    SOFTMAX_SINGLE_LABEL = 0
    SIGMOID_MULTI_LABEL = 1

    @classmethod
    def parse(cls, value) -> "HeadMode":
        if isinstance(value, HeadMode):
            return value
        key = str(value).lower().replace("-", "_")
        table = {"softmax": cls.SOFTMAX_SINGLE_LABEL, "softmax_single_label": cls.SOFTMAX_SINGLE_LABEL,
                 "single": cls.SOFTMAX_SINGLE_LABEL, "sigmoid": cls.SIGMOID_MULTI_LABEL,
                 "sigmoid_multi_label": cls.SIGMOID_MULTI_LABEL, "multi": cls.SIGMOID_MULTI_LABEL}
        if key not in table:
            raise InputError(f"unknown head mode {value!r}")
        return table[key]


@dataclass(eq=False)
class LoraBlock:
    a_q: np.ndarray  # (r, d)
    b_q: np.ndarray  # (d, r)
    a_v: np.ndarray
    b_v: np.ndarray

    def arrays(self):
        return (self.a_q, self.b_q, self.a_v, self.b_v)


@dataclass(eq=False)
class Expert:
    task_id: str
    modality: Modality
    rank: int
    num_classes: int
    head_mode: HeadMode
    lora: list[LoraBlock]
    head_w: np.ndarray  # (K, d)
    head_b: np.ndarray  # (K,)
    class_names: list[str]
    embed3d: tuple[np.ndarray, np.ndarray] | None = None  # (proj3d, pos3d) override
    backbone_fingerprint: int | None = None

    def __post_init__(self):
        self.modality = Modality.parse(self.modality)
        self.head_mode = HeadMode.parse(self.head_mode)
        self.validate()

    @property
    def d(self) -> int:
        return self.head_w.shape[1]

    @property
    def num_blocks(self) -> int:
        return len(self.lora)

    def validate(self):
        d, r, K = self.head_w.shape[1], self.rank, self.num_classes
        if not 1 <= r <= d:
            raise ContractError(f"expert {self.task_id!r}: rank {r} outside [1, {d}]")
        min_k = 2 if self.head_mode is HeadMode.SOFTMAX_SINGLE_LABEL else 1
        if K < min_k:
            raise ContractError(f"expert {self.task_id!r}: {K} classes, need at least {min_k}")
        if self.head_w.shape != (K, d) or self.head_b.shape != (K,):
            raise ShapeError(f"expert {self.task_id!r}: head shapes {self.head_w.shape}/{self.head_b.shape}")
        if len(self.class_names) != K:
            raise ShapeError(f"expert {self.task_id!r}: {len(self.class_names)} class names for K={K}")
        for i, blk in enumerate(self.lora):
            for name, arr, shape in (("a_q", blk.a_q, (r, d)), ("b_q", blk.b_q, (d, r)),
                                     ("a_v", blk.a_v, (r, d)), ("b_v", blk.b_v, (d, r))):
                if arr.shape != shape:
                    raise ShapeError(f"expert {self.task_id!r} block {i} {name}: {arr.shape} != {shape}")

    def lora_param_count(self) -> int:
        return sum(a.size for blk in self.lora for a in blk.arrays())

    def head_param_count(self) -> int:
        return self.head_w.size + self.head_b.size

    def param_count(self) -> int:
        extra = sum(a.size for a in self.embed3d) if self.embed3d is not None else 0
        return self.lora_param_count() + self.head_param_count() + extra

    def nbytes(self) -> int:
        return BYTES_PER_PARAM * self.param_count()

    def trainable_arrays(self) -> dict[str, np.ndarray]:
        """Name -> array for every trainable tensor, in a fixed order."""
        out = {}
        for i, blk in enumerate(self.lora):
            out[f"lora.{i}.a_q"] = blk.a_q
            out[f"lora.{i}.b_q"] = blk.b_q
            out[f"lora.{i}.a_v"] = blk.a_v
            out[f"lora.{i}.b_v"] = blk.b_v
        out["head_w"] = self.head_w
        out["head_b"] = self.head_b
        if self.embed3d is not None:
            out["embed3d.proj3d"] = self.embed3d[0]
            out["embed3d.pos3d"] = self.embed3d[1]
        return out

    def copy(self, dtype=None) -> "Expert":
        cp = (lambda a: np.array(a, dtype=dtype or a.dtype))
        return Expert(self.task_id, self.modality, self.rank, self.num_classes, self.head_mode,
                      [LoraBlock(*(cp(a) for a in blk.arrays())) for blk in self.lora],
                      cp(self.head_w), cp(self.head_b), list(self.class_names),
                      None if self.embed3d is None else (cp(self.embed3d[0]), cp(self.embed3d[1])),
                      self.backbone_fingerprint)

    def __eq__(self, other):
        if not isinstance(other, Expert):
            return NotImplemented
        scalars = ("task_id", "modality", "rank", "num_classes", "head_mode", "class_names",
                   "backbone_fingerprint")
        if any(getattr(self, s) != getattr(other, s) for s in scalars):
            return False
        if (self.embed3d is None) != (other.embed3d is None) or len(self.lora) != len(other.lora):
            return False
        mine, theirs = self.trainable_arrays(), other.trainable_arrays()
        return all(_bit_equal(mine[k], theirs[k]) for k in mine)

    __hash__ = None


def _bit_equal(a, b) -> bool:
    return a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()


def new_expert(task_id: str, backbone: Backbone, rank: int, num_classes: int,
               modality="2d", head_mode="softmax", class_names=None, seed: int = 0,
               train_3d_embedding: bool = False) -> Expert:
    """Fresh expert: A ~ N(0, 0.02^2), B = 0, zero head.

    With B = 0 the expert reproduces the frozen backbone exactly.
    """
    d, L = backbone.config.d, backbone.config.num_blocks
    rng = Xoshiro(mix_seed(seed, "expert", task_id))
    lora = []
    for _ in range(L):
        a_q = rng.normal((rank, d), INIT_STD)
        a_v = rng.normal((rank, d), INIT_STD)
        lora.append(LoraBlock(a_q, np.zeros((d, rank), np.float32), a_v, np.zeros((d, rank), np.float32)))
    embed3d = None
    if train_3d_embedding:
        embed3d = (np.array(backbone.embedding.proj3d, dtype=np.float32),
                   np.array(backbone.embedding.pos3d, dtype=np.float32))
    names = list(class_names) if class_names else [f"class_{k}" for k in range(num_classes)]
    return Expert(task_id, modality, rank, num_classes, head_mode, lora,
                  np.zeros((num_classes, d), np.float32), np.zeros(num_classes, np.float32),
                  names, embed3d, backbone.fingerprint())


def lora_delta(x: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-form low-rank update ``(x @ A.T) @ B.T`` for x (m, d), A (r, d), B (d, r)."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != x.shape[-1] or b.shape != (a.shape[1], a.shape[0]):
        raise ShapeError(f"lora_delta shapes: x {x.shape}, A {a.shape}, B {b.shape}")
    return nx.matmul(nx.matmul(x, nx.transpose(a)), nx.transpose(b))


def pad_lora(a: np.ndarray, b: np.ndarray, r_max: int):
    r = a.shape[0]
    if r_max < r:
        raise ContractError(f"r_max={r_max} is below expert rank {r}")
    if r_max == r:
        return a, b
    a2 = np.zeros((r_max, a.shape[1]), dtype=a.dtype)
    a2[:r] = a
    b2 = np.zeros((b.shape[0], r_max), dtype=b.dtype)
    b2[:, :r] = b
    return a2, b2


def pad_to_rank(e: Expert, r_max: int) -> list[LoraBlock]:
    """Zero-pad every A (rows) and B (columns) of ``e`` to ``r_max``."""
    out = []
    for blk in e.lora:
        a_q, b_q = pad_lora(blk.a_q, blk.b_q, r_max)
        a_v, b_v = pad_lora(blk.a_v, blk.b_v, r_max)
        out.append(LoraBlock(a_q, b_q, a_v, b_v))
    return out


def max_rank(experts) -> int:
    experts = list(experts)
    if not experts:
        raise ContractError("max_rank of an empty expert list")
    return max(e.rank for e in experts)


def lora_param_count(d: int, num_blocks: int, rank: int) -> int:
    """Two targets (Q, V), two matrices each, d*r entries per matrix, per block."""
    return num_blocks * 4 * d * rank


def count_trainable_ratio(e: Expert, b: Backbone) -> dict:
    lora = e.lora_param_count()
    head = e.head_param_count()
    base = b.param_count()
    return {
        "lora_params": lora,
        "head_params": head,
        "backbone_params": base,
        "ratio": lora / base,
        "ratio_with_head": (lora + head) / base,
    }


# --- .ucex codec -----------------------------------------------------------

def serialize_expert(e: Expert) -> bytes:
    w = Writer()
    w.raw(UCEX_MAGIC)
    w.u32(UCEX_VERSION)
    flags = (FLAG_EMBED3D if e.embed3d is not None else 0)
    flags |= FLAG_FINGERPRINT if e.backbone_fingerprint is not None else 0
    w.u32(flags)
    w.string(e.task_id)
    w.u8(int(e.modality))
    w.u32(e.rank)
    w.u32(e.num_classes)
    w.u8(int(e.head_mode))
    w.u32(e.d)
    w.u32(e.num_blocks)
    if e.backbone_fingerprint is not None:
        w.u32(e.backbone_fingerprint)
    for blk in e.lora:
        for arr in blk.arrays():
            w.array(arr)
    w.array(e.head_w)
    w.array(e.head_b)
    for name in e.class_names:
        w.string(name)
    if e.embed3d is not None:
        for arr in e.embed3d:
            w.u32(arr.shape[0])
            w.u32(arr.shape[1])
            w.array(arr)
    return w.finish()


def deserialize_expert(data: bytes, what: str = "expert") -> Expert:
    r = Reader(data, UCEX_MAGIC, UCEX_VERSION, what)
    flags = r.u32("flags")
    if flags & ~(FLAG_EMBED3D | FLAG_FINGERPRINT):
        raise CodecError(f"{what}: unknown flag bits {flags:#x}")
    task_id = r.string("task_id")
    modality_raw, rank, K, head_raw = r.u8("modality"), r.u32("rank"), r.u32("num_classes"), r.u8("head_mode")
    d, L = r.u32("d"), r.u32("num_blocks")
    try:
        modality, head_mode = Modality(modality_raw), HeadMode(head_raw)
    except ValueError as exc:
        raise CodecError(f"{what}: bad enum value ({exc})") from exc
    if not 1 <= rank <= d:
        raise CodecError(f"{what}: rank {rank} invalid for d={d}")
    fp = r.u32("backbone_fingerprint") if flags & FLAG_FINGERPRINT else None
    lora = [LoraBlock(r.array((rank, d), f"block[{i}].a_q"), r.array((d, rank), f"block[{i}].b_q"),
                      r.array((rank, d), f"block[{i}].a_v"), r.array((d, rank), f"block[{i}].b_v"))
            for i in range(L)]
    head_w = r.array((K, d), "head_w")
    head_b = r.array((K,), "head_b")
    names = [r.string(f"class_names[{k}]") for k in range(K)]
    embed3d = None
    if flags & FLAG_EMBED3D:
        parts = []
        for name in ("proj3d", "pos3d"):
            rows, cols = r.u32(f"{name}.rows"), r.u32(f"{name}.cols")
            if cols != d:
                raise CodecError(f"{what}: {name} has {cols} columns, expected d={d}")
            parts.append(r.array((rows, cols), name))
        embed3d = tuple(parts)
    r.done()
    try:
        return Expert(task_id, modality, rank, K, head_mode, lora, head_w, head_b, names, embed3d, fp)
    except (ShapeError, ContractError) as exc:
        raise CodecError(f"{what}: {exc}") from exc


def save_expert(e: Expert, path) -> None:
    Path(path).write_bytes(serialize_expert(e))


def load_expert(path) -> Expert:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CodecError(f"cannot read expert {path}: {exc}") from exc
    return deserialize_expert(data, str(path))


# --- registry --------------------------------------------------------------

@dataclass
class Registry:
    """Task id -> expert, validated against one backbone."""

    backbone: Backbone
    experts: dict[str, Expert] = field(default_factory=dict)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @property
    def fingerprint(self) -> int:
        return self.backbone.fingerprint()

    def check_compatible(self, e: Expert):
        c = self.backbone.config
        if e.backbone_fingerprint is not None and e.backbone_fingerprint != self.fingerprint:
            raise CompatibilityError(
                f"expert {e.task_id!r} was built for backbone {e.backbone_fingerprint:#010x}, "
                f"registry backbone is {self.fingerprint:#010x}")
        if e.d != c.d or e.num_blocks != c.num_blocks:
            raise CompatibilityError(
                f"expert {e.task_id!r} has d={e.d}, L={e.num_blocks}; backbone has d={c.d}, L={c.num_blocks}")
        if e.embed3d is not None:
            want = (self.backbone.embedding.proj3d.shape, self.backbone.embedding.pos3d.shape)
            if (e.embed3d[0].shape, e.embed3d[1].shape) != want:
                raise CompatibilityError(f"expert {e.task_id!r}: 3D embedding override has wrong shape")

    def register(self, e: Expert) -> None:
        self.check_compatible(e)
        with self._lock:
            if e.task_id in self.experts:
                raise ConflictError(f"task id {e.task_id!r} is already registered")
            self.experts[e.task_id] = e

    def lookup(self, task_id: str) -> Expert:
        try:
            return self.experts[task_id]
        except KeyError:
            raise NotFoundError(f"unknown task id {task_id!r}") from None

    def __contains__(self, task_id):
        return task_id in self.experts

    def __len__(self):
        return len(self.experts)

    @classmethod
    def from_dir(cls, backbone: Backbone, directory) -> "Registry":
        reg = cls(backbone)
        for path in sorted(Path(directory).glob("*.ucex")):
            reg.register(load_expert(path))
        return reg


def registry_register(reg: Registry, e: Expert) -> None:
    reg.register(e)


def registry_lookup(reg: Registry, task_id: str) -> Expert:
    return reg.lookup(task_id)
