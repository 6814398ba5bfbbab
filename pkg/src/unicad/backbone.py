"""Frozen ViT backbone shared by every task.

Pre-norm blocks with masked multi-head self-attention. Per-request low-rank
deltas are added to the query and value projections only:
``q = y @ W_Q + b_Q + (y @ A_q.T) @ B_q.T`` (tokens are rows), and likewise for
``v``. Keys, the output projection and the MLP are never adapted.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import numerics as nx
from .codec import Reader, Writer
from .errors import CodecError, ContractError, InputError, ShapeError
from .prng import Xoshiro, mix_seed
from .uel import EmbeddingWeights, PatchSpec2D, PatchSpec3D, StandardizedBatch

INIT_STD = 0.02
UCBB_MAGIC = b"UCBB"
UCBB_VERSION = 1


@dataclass(frozen=True)
class BackboneConfig:
    d: int
    num_blocks: int
    num_heads: int
    mlp_dim: int
    eps: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if min(self.d, self.num_blocks, self.num_heads, self.mlp_dim) <= 0:
            raise InputError("backbone dimensions must be positive")
        if self.d % self.num_heads:
            raise InputError(f"d={self.d} is not divisible by num_heads={self.num_heads}")
        if self.eps <= 0:
            raise InputError("eps must be positive")
        # eps is stored as f32 on disk; keep the in-memory value identical.
        object.__setattr__(self, "eps", float(np.float32(self.eps)))

    @property
    def head_dim(self) -> int:
        return self.d // self.num_heads


@dataclass(frozen=True, eq=False)
class BlockWeights:
    w_q: np.ndarray
    b_q: np.ndarray
    w_k: np.ndarray
    b_k: np.ndarray
    w_v: np.ndarray
    b_v: np.ndarray
    w_o: np.ndarray
    b_o: np.ndarray
    mlp_in: np.ndarray
    mlp_in_b: np.ndarray
    mlp_out: np.ndarray
    mlp_out_b: np.ndarray
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray

    @staticmethod
    def shapes(d: int, mlp: int) -> dict[str, tuple[int, ...]]:
        sq, v = (d, d), (d,)
        return {
            "w_q": sq, "b_q": v, "w_k": sq, "b_k": v, "w_v": sq, "b_v": v,
            "w_o": sq, "b_o": v, "mlp_in": (d, mlp), "mlp_in_b": (mlp,),
            "mlp_out": (mlp, d), "mlp_out_b": v,
            "ln1_g": v, "ln1_b": v, "ln2_g": v, "ln2_b": v,
        }

    def arrays(self):
        return [getattr(self, f.name) for f in fields(self)]

    def astype(self, dtype) -> "BlockWeights":
        return BlockWeights(*(np.ascontiguousarray(a, dtype=dtype) for a in self.arrays()))


@dataclass(eq=False)
class LoraDeltaSet:
    """Padded low-rank matrices for one block, one slice per batch row."""

    a_q: np.ndarray  # (n, r_max, d)
    b_q: np.ndarray  # (n, d, r_max)
    a_v: np.ndarray
    b_v: np.ndarray

    @property
    def n(self) -> int:
        return self.a_q.shape[0]

    @property
    def r_max(self) -> int:
        return self.a_q.shape[1]

    def validate(self, n: int, d: int):
        if self.n != n:
            raise ContractError(f"delta set has {self.n} rows, batch has {n}")
        r = self.r_max
        for name, arr, shape in (("a_q", self.a_q, (n, r, d)), ("b_q", self.b_q, (n, d, r)),
                                 ("a_v", self.a_v, (n, r, d)), ("b_v", self.b_v, (n, d, r))):
            if arr.shape != shape:
                raise ContractError(f"{name} has shape {arr.shape}, expected {shape} (uniform r_max)")

    @classmethod
    def stack(cls, per_row: list[tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]]):
        """Build from ``[(A_q, B_q, A_v, B_v), ...]`` already padded to one rank."""
        ranks = {row[0].shape[0] for row in per_row}
        if len(ranks) != 1:
            raise ContractError(f"rank mismatch across batch: {sorted(ranks)}; pad to r_max first")
        return cls(*(np.ascontiguousarray(np.stack([row[k] for row in per_row])) for k in range(4)))


@dataclass(frozen=True, eq=False)
class Backbone:
    config: BackboneConfig
    spec2d: PatchSpec2D
    spec3d: PatchSpec3D
    embedding: EmbeddingWeights
    blocks: tuple[BlockWeights, ...]
    final_g: np.ndarray
    final_b: np.ndarray
    _fingerprint: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        for arr in self.iter_arrays():
            arr.flags.writeable = False
        self._validate()

    def _validate(self):
        c = self.config
        d = c.d
        emb = self.embedding
        want = {
            "proj2d": (self.spec2d.patch_len, d), "proj3d": (self.spec3d.patch_len, d),
            "pos2d": (self.spec2d.max_tokens + 1, d), "pos3d": (self.spec3d.max_tokens + 1, d),
            "cls": (d,),
        }
        for name, shape in want.items():
            if getattr(emb, name).shape != shape:
                raise ShapeError(f"embedding.{name} shape {getattr(emb, name).shape} != {shape}")
        if len(self.blocks) != c.num_blocks:
            raise ShapeError(f"{len(self.blocks)} blocks, config says {c.num_blocks}")
        shapes = BlockWeights.shapes(d, c.mlp_dim)
        for i, blk in enumerate(self.blocks):
            for name, shape in shapes.items():
                if getattr(blk, name).shape != shape:
                    raise ShapeError(f"block {i}.{name} shape {getattr(blk, name).shape} != {shape}")

    @property
    def dtype(self):
        return self.embedding.cls.dtype

    def iter_arrays(self):
        yield from self.embedding.arrays()
        for blk in self.blocks:
            yield from blk.arrays()
        yield self.final_g
        yield self.final_b

    def param_count(self) -> int:
        return sum(int(a.size) for a in self.iter_arrays())

    def astype(self, dtype) -> "Backbone":
        """Copy in another precision (used for double-precision gradient checks)."""
        return Backbone(self.config, self.spec2d, self.spec3d, self.embedding.astype(dtype),
                        tuple(b.astype(dtype) for b in self.blocks),
                        self.final_g.astype(dtype), self.final_b.astype(dtype))

    def to_bytes(self) -> bytes:
        return serialize_backbone(self)

    def fingerprint(self) -> int:
        """CRC32 of the ``.ucbb`` body, i.e. the file's own CRC trailer."""
        if not self._fingerprint:
            self._fingerprint.append(self.content_hash())
        return self._fingerprint[0]

    def content_hash(self) -> int:
        """Recomputed on every call (unlike ``fingerprint``) to detect mutation."""
        # CRC over body+trailer is a constant residue, so hash the body only.
        return zlib.crc32(self.to_bytes()[:-4])


def default_specs(d_patch2d=16, channels2d=3, max2d=(224, 224),
                  patch3d=(7, 7, 7), channels3d=1, max3d=(28, 28, 28)):
    return (PatchSpec2D(d_patch2d, d_patch2d, channels2d, *max2d),
            PatchSpec3D(*patch3d, channels3d, *max3d))


def init_random_backbone(config: BackboneConfig, spec2d: PatchSpec2D, spec3d: PatchSpec3D,
                         seed: int | None = None) -> Backbone:
    """Seeded stand-in for pretrained weights.

    Matrices, positional tables and CLS are drawn from N(0, 0.02^2) in a fixed
    order (embedding, then per block W_Q, W_K, W_V, W_O, mlp_in, mlp_out);
    biases are zero and layer-norm gains one.
    """
    if seed is not None and seed != config.seed:
        config = replace(config, seed=seed)
    rng = Xoshiro(mix_seed(config.seed, "backbone"))
    d, mlp = config.d, config.mlp_dim

    def draw(*shape):
        return rng.normal(shape, INIT_STD)

    emb = EmbeddingWeights(
        proj2d=draw(spec2d.patch_len, d), proj3d=draw(spec3d.patch_len, d),
        pos2d=draw(spec2d.max_tokens + 1, d), pos3d=draw(spec3d.max_tokens + 1, d),
        cls=draw(d),
    )
    zeros, ones = (lambda n: np.zeros(n, np.float32)), (lambda n: np.ones(n, np.float32))
    blocks = []
    for _ in range(config.num_blocks):
        w_q, w_k, w_v, w_o = draw(d, d), draw(d, d), draw(d, d), draw(d, d)
        m_in, m_out = draw(d, mlp), draw(mlp, d)
        blocks.append(BlockWeights(w_q, zeros(d), w_k, zeros(d), w_v, zeros(d), w_o, zeros(d),
                                   m_in, zeros(mlp), m_out, zeros(d),
                                   ones(d), zeros(d), ones(d), zeros(d)))
    return Backbone(config, spec2d, spec3d, emb, tuple(blocks), ones(d), zeros(d))


# --- forward ---------------------------------------------------------------

def lora_apply(y: np.ndarray, a: np.ndarray, b: np.ndarray):
    """Per-row ``(y_i @ A_i.T) @ B_i.T`` for y (n, L, d), A (n, r, d), B (n, d, r).

    Returns ``(delta, u)`` where ``u = y @ A.T`` is kept for the backward pass.
    """
    at = np.ascontiguousarray(a.transpose(0, 2, 1))
    bt = np.ascontiguousarray(b.transpose(0, 2, 1))
    u = nx.bmm(y, at)
    return nx.bmm(u, bt), u


def _split_heads(t, n, L, h, dh):
    return np.ascontiguousarray(t.reshape(n, L, h, dh).transpose(0, 2, 1, 3)).reshape(n * h, L, dh)


def _merge_heads(t, n, L, h, dh):
    return np.ascontiguousarray(t.reshape(n, h, L, dh).transpose(0, 2, 1, 3)).reshape(n, L, h * dh)


def attention_masked(y, mask, blk: BlockWeights, deltas: LoraDeltaSet | None, num_heads: int,
                     cache: dict | None = None):
    """Masked multi-head self-attention over ``y`` (n, L, d); returns (n, L, d)."""
    n, L, d = y.shape
    h = num_heads
    dh = d // h
    if deltas is not None:
        deltas.validate(n, d)
    q = nx.linear(y, blk.w_q, blk.b_q)
    k = nx.linear(y, blk.w_k, blk.b_k)
    v = nx.linear(y, blk.w_v, blk.b_v)
    if deltas is not None:
        dq, u_q = lora_apply(y, deltas.a_q, deltas.b_q)
        dv, u_v = lora_apply(y, deltas.a_v, deltas.b_v)
        q = q + dq
        v = v + dv
    qh, kh, vh = (_split_heads(t, n, L, h, dh) for t in (q, k, v))
    scale = y.dtype.type(1.0 / np.sqrt(dh))
    scores = nx.bmm(qh, np.ascontiguousarray(kh.transpose(0, 2, 1))) * scale
    key_mask = np.repeat(np.asarray(mask, dtype=bool), h, axis=0)[:, None, :]
    probs = nx.softmax_masked(scores, key_mask)
    ctx = _merge_heads(nx.bmm(probs, vh), n, L, h, dh)
    out = nx.linear(ctx, blk.w_o, blk.b_o)
    if cache is not None:
        cache.update(qh=qh, kh=kh, vh=vh, probs=probs, ctx=ctx, scale=scale)
        if deltas is not None:
            cache.update(u_q=u_q, u_v=u_v)
    return out


def block_forward(x, mask, blk: BlockWeights, deltas: LoraDeltaSet | None, num_heads: int,
                  eps: float, cache: dict | None = None):
    """``x + attn(ln1(x))`` followed by ``+ mlp(ln2(.))``."""
    y1, xhat1, rstd1 = nx.layer_norm_fwd(x, blk.ln1_g, blk.ln1_b, eps)
    x2 = x + attention_masked(y1, mask, blk, deltas, num_heads, cache)
    y2, xhat2, rstd2 = nx.layer_norm_fwd(x2, blk.ln2_g, blk.ln2_b, eps)
    pre = nx.linear(y2, blk.mlp_in, blk.mlp_in_b)
    act = nx.gelu(pre)
    out = x2 + nx.linear(act, blk.mlp_out, blk.mlp_out_b)
    if cache is not None:
        cache.update(y1=y1, xhat1=xhat1, rstd1=rstd1, xhat2=xhat2, rstd2=rstd2,
                     y2=y2, pre=pre, act=act)
    return out


def backbone_forward(bb: Backbone, batch: StandardizedBatch,
                     deltas: list[LoraDeltaSet | None] | None = None,
                     caches: list | None = None) -> np.ndarray:
    """Run every block and return the final-normed CLS row of each sequence, (n, d).

    ``deltas`` holds one entry per block (``None`` skips the low-rank path).
    If ``caches`` is a list it receives per-block activations plus a final
    entry for the output norm.
    """
    c = bb.config
    if deltas is None:
        deltas = [None] * c.num_blocks
    if len(deltas) != c.num_blocks:
        raise ContractError(f"got {len(deltas)} delta sets for {c.num_blocks} blocks")
    x = np.ascontiguousarray(batch.tokens, dtype=bb.dtype)
    if x.ndim != 3 or x.shape[2] != c.d:
        raise ShapeError(f"batch tokens {x.shape} incompatible with d={c.d}")
    for blk, ds in zip(bb.blocks, deltas):
        cache = {} if caches is not None else None
        x = block_forward(x, batch.mask, blk, ds, c.num_heads, c.eps, cache)
        if caches is not None:
            caches.append(cache)
    cls_out, xhat, rstd = nx.layer_norm_fwd(np.ascontiguousarray(x[:, 0, :]),
                                            bb.final_g, bb.final_b, c.eps)
    if caches is not None:
        caches.append({"xhat": xhat, "rstd": rstd, "seq_len": x.shape[1]})
    return cls_out


# --- .ucbb codec -----------------------------------------------------------

def serialize_backbone(bb: Backbone) -> bytes:
    c = bb.config
    w = Writer()
    w.raw(UCBB_MAGIC)
    w.u32(UCBB_VERSION)
    for v in (c.d, c.num_blocks, c.num_heads, c.mlp_dim):
        w.u32(v)
    w.f32(c.eps)
    w.u64(c.seed)
    s2, s3 = bb.spec2d, bb.spec3d
    for v in (s2.patch_h, s2.patch_w, s2.channels, s2.max_h, s2.max_w,
              s3.patch_d, s3.patch_h, s3.patch_w, s3.channels, s3.max_d, s3.max_h, s3.max_w):
        w.u32(v)
    for arr in bb.iter_arrays():
        w.array(arr)
    return w.finish()


def deserialize_backbone(data: bytes, what: str = "backbone") -> Backbone:
    r = Reader(data, UCBB_MAGIC, UCBB_VERSION, what)
    d, nb, heads, mlp = (r.u32(f) for f in ("d", "num_blocks", "num_heads", "mlp_dim"))
    eps, seed = r.f32("eps"), r.u64("seed")
    try:
        config = BackboneConfig(d, nb, heads, mlp, eps, seed)
        s2 = PatchSpec2D(*(r.u32(f"spec2d[{i}]") for i in range(5)))
        s3 = PatchSpec3D(*(r.u32(f"spec3d[{i}]") for i in range(7)))
    except InputError as exc:
        raise CodecError(f"{what}: invalid header: {exc}") from exc
    emb = EmbeddingWeights(
        r.array((s2.patch_len, d), "proj2d"), r.array((s3.patch_len, d), "proj3d"),
        r.array((s2.max_tokens + 1, d), "pos2d"), r.array((s3.max_tokens + 1, d), "pos3d"),
        r.array((d,), "cls"),
    )
    shapes = BlockWeights.shapes(d, mlp)
    blocks = [BlockWeights(**{name: r.array(shape, f"block[{b}].{name}")
                              for name, shape in shapes.items()}) for b in range(nb)]
    fg, fb = r.array((d,), "final_norm.gamma"), r.array((d,), "final_norm.beta")
    r.done()
    return Backbone(config, s2, s3, emb, tuple(blocks), fg, fb)


def save_backbone(bb: Backbone, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_backbone(bb))


def load_backbone(path) -> Backbone:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CodecError(f"cannot read backbone {path}: {exc}") from exc
    return deserialize_backbone(data, str(path))
