"""Expert training against a frozen backbone.

The graph is fixed (embedding, pre-norm blocks, final norm, linear head), so
gradients come from hand-written per-layer backward passes rather than a
general tape. Only expert tensors ever receive gradient buffers: the low-rank
Q/V matrices of every block, the head, and optionally a 3D embedding override.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .backbone import Backbone, LoraDeltaSet, backbone_forward
from .engine import decide, head_logits, head_scores
from .errors import InputError, NumericError, TrainingError
from .evaluation import accuracy, per_label_auc
from .experts import Expert, HeadMode, new_expert
from .prng import Xoshiro, mix_seed
from .uel import Modality, StandardizedBatch, embed_with_patches, standardize_batch

LOG_CLAMP = 1e-12


@dataclass
class TrainConfig:
    learning_rate: float = 3e-4
    epochs: int = 100
    batch_size: int = 32
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    rank: int = 4
    loss_mode: str = "cross_entropy"  # or "binary_cross_entropy"
    train_3d_embedding: bool = False

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise InputError("learning_rate must be positive")
        if self.epochs < 1:
            raise InputError("epochs must be at least 1")
        if self.batch_size < 1:
            raise InputError("batch_size must be at least 1")
        if self.loss_mode not in ("cross_entropy", "binary_cross_entropy"):
            raise InputError(f"unknown loss_mode {self.loss_mode!r}")


# --- losses ------------------------------------------------------------------

def cross_entropy(probs, label: int) -> float:
    return float(-np.log(max(float(probs[label]), LOG_CLAMP)))


def bce(scores, labels) -> float:
    s = np.clip(np.asarray(scores, dtype=np.float64), LOG_CLAMP, 1.0 - LOG_CLAMP)
    y = np.asarray(labels, dtype=np.float64)
    return float(-np.sum(y * np.log(s) + (1.0 - y) * np.log(1.0 - s)) / s.size)


def batch_loss(scores: np.ndarray, labels: np.ndarray, mode: HeadMode) -> float:
    """Mean per-sample loss over a batch."""
    if mode is HeadMode.SIGMOID_MULTI_LABEL:
        return float(np.mean([bce(s, y) for s, y in zip(scores, labels)]))
    return float(np.mean([cross_entropy(s, int(y)) for s, y in zip(scores, labels)]))


def loss_grad_logits(scores: np.ndarray, labels: np.ndarray, mode: HeadMode) -> np.ndarray:
    """d(mean loss)/d(logits). Softmax+CE gives ``p - onehot``; sigmoid+BCE gives ``(s - y)/K``."""
    n, K = scores.shape
    if mode is HeadMode.SIGMOID_MULTI_LABEL:
        return (scores - labels.astype(scores.dtype)) / (K * n)
    g = scores.copy()
    g[np.arange(n), labels.astype(np.int64)] -= 1
    return g / n


# --- forward with recorded activations ---------------------------------------

@dataclass
class Tape:
    batch: StandardizedBatch
    caches: list
    cls: np.ndarray
    logits: np.ndarray
    scores: np.ndarray
    patches: list | None  # per-sample patch rows when the 3D embedding is trainable


def _shared_deltas(e: Expert, n: int, dtype) -> list[LoraDeltaSet]:
    out = []
    for blk in e.lora:
        rows = [np.broadcast_to(a.astype(dtype), (n,) + a.shape) for a in blk.arrays()]
        out.append(LoraDeltaSet(*(np.ascontiguousarray(r) for r in rows)))
    return out


def embed_inputs(bb: Backbone, e: Expert, inputs, with_patches: bool = False):
    emb = bb.embedding
    if e.embed3d is not None and e.modality is Modality.THREE_D:
        emb = emb.with_3d(*(a.astype(bb.dtype) for a in e.embed3d))
    seqs, patches = [], []
    for x in inputs:
        seq, p = embed_with_patches(x, e.modality, bb.spec2d, bb.spec3d, emb)
        seqs.append(seq)
        patches.append(p)
    return seqs, (patches if with_patches else None)


def forward(bb: Backbone, e: Expert, inputs=None, seqs=None, record: bool = True) -> Tape:
    """Forward a single-expert batch, recording what ``backward`` needs.

    Pass precomputed ``seqs`` to skip re-embedding when the embedding is frozen.
    """
    trainable_embed = e.embed3d is not None and e.modality is Modality.THREE_D
    patches = None
    if seqs is None or trainable_embed:
        seqs, patches = embed_inputs(bb, e, inputs, with_patches=trainable_embed)
    batch = standardize_batch(seqs)
    caches = [] if record else None
    cls = backbone_forward(bb, batch, _shared_deltas(e, batch.n, bb.dtype), caches)
    logits = head_logits(cls, e)
    scores = head_scores(logits, e.head_mode)
    return Tape(batch, caches, cls, logits, scores, patches)



def loss_value(bb: Backbone, e: Expert, inputs, labels, seqs=None) -> float:
    tape = forward(bb, e, inputs, seqs, record=False)
    return batch_loss(tape.scores, np.asarray(labels), e.head_mode)


# --- backward ----------------------------------------------------------------

def _mm_t(a, b):
    """``a.T @ b`` over flattened leading axes: (..., p) x (..., q) -> (p, q)."""
    return nx.matmul(nx.transpose(a.reshape(-1, a.shape[-1])), b.reshape(-1, b.shape[-1]))


def _split(t, n, L, h, dh):
    return np.ascontiguousarray(t.reshape(n, L, h, dh).transpose(0, 2, 1, 3)).reshape(n * h, L, dh)


def _merge(t, n, L, h, dh):
    return np.ascontiguousarray(t.reshape(n, h, L, dh).transpose(0, 2, 1, 3)).reshape(n, L, h * dh)


def _bt(t):
    return np.ascontiguousarray(t.transpose(0, 2, 1))


def softmax_bwd(probs, dprobs):
    return probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))


def block_backward(dout, cache, blk, lora, num_heads, grads, prefix):
    """Backpropagate through one block; accumulates low-rank grads into ``grads``."""
    n, L, d = dout.shape
    h, dh = num_heads, d // num_heads
    dt = dout.dtype
    # MLP branch
    d_act = nx.linear(dout, nx.transpose(blk.mlp_out))
    d_pre = d_act * nx.gelu_grad(cache["pre"])
    d_y2 = nx.linear(d_pre, nx.transpose(blk.mlp_in))
    d_x2 = dout + nx.layer_norm_bwd(d_y2, cache["xhat2"], cache["rstd2"], blk.ln2_g)
    # attention branch
    d_ctx = _split(nx.linear(d_x2, nx.transpose(blk.w_o)), n, L, h, dh)
    probs, qh, kh, vh = cache["probs"], cache["qh"], cache["kh"], cache["vh"]
    d_probs = nx.bmm(d_ctx, _bt(vh))
    d_vh = nx.bmm(_bt(probs), d_ctx)
    d_scores = softmax_bwd(probs, d_probs) * cache["scale"]
    d_qh = nx.bmm(d_scores, kh)
    d_kh = nx.bmm(_bt(d_scores), qh)
    dq, dk, dv = (_merge(t, n, L, h, dh) for t in (d_qh, d_kh, d_vh))
    y1 = cache["y1"]
    d_y1 = (nx.linear(dq, nx.transpose(blk.w_q)) + nx.linear(dk, nx.transpose(blk.w_k))
            + nx.linear(dv, nx.transpose(blk.w_v)))
    for tgt, dproj in (("q", dq), ("v", dv)):
        a = getattr(lora, f"a_{tgt}").astype(dt)
        b = getattr(lora, f"b_{tgt}").astype(dt)
        u = cache[f"u_{tgt}"]
        grads[f"{prefix}.b_{tgt}"] = _mm_t(dproj, u)          # (d, r)
        du = nx.linear(dproj, b)                              # (n, L, r)
        grads[f"{prefix}.a_{tgt}"] = _mm_t(du, y1)            # (r, d)
        d_y1 = d_y1 + nx.linear(du, a)
    return d_x2 + nx.layer_norm_bwd(d_y1, cache["xhat1"], cache["rstd1"], blk.ln1_g)


def backward(tape: Tape, e: Expert, bb: Backbone, labels) -> dict[str, np.ndarray]:
    """Exact gradients of the mean batch loss for every trainable tensor of ``e``.

    The returned mapping has exactly the keys of ``e.trainable_arrays()``; frozen
    backbone tensors never get a gradient buffer.
    """
    labels = np.asarray(labels)
    c = bb.config
    dt = bb.dtype
    grads: dict[str, np.ndarray] = {}
    dz = loss_grad_logits(tape.scores, labels, e.head_mode).astype(dt)
    head_w = e.head_w.astype(dt)
    grads["head_w"] = nx.matmul(nx.transpose(dz), tape.cls)
    grads["head_b"] = dz.sum(axis=0)
    d_cls = nx.matmul(dz, head_w)
    final = tape.caches[-1]
    d_x0 = nx.layer_norm_bwd(d_cls, final["xhat"], final["rstd"], bb.final_g)
    n, L = tape.batch.n, tape.batch.L_max
    dx = np.zeros((n, L, c.d), dtype=dt)
    dx[:, 0, :] = d_x0
    for i in range(c.num_blocks - 1, -1, -1):
        dx = block_backward(dx, tape.caches[i], bb.blocks[i], e.lora[i], c.num_heads, grads, f"lora.{i}")
    if e.embed3d is not None:
        proj, pos = e.embed3d
        g_proj = np.zeros(proj.shape, dtype=dt)
        g_pos = np.zeros(pos.shape, dtype=dt)
        if e.modality is Modality.THREE_D:
            for i, p in enumerate(tape.patches):
                v = int(tape.batch.valid_lens[i])
                g_proj += nx.matmul(nx.transpose(p.astype(dt)), np.ascontiguousarray(dx[i, 1:v]))
                g_pos[:v] += dx[i, :v]
        grads["embed3d.proj3d"] = g_proj
        grads["embed3d.pos3d"] = g_pos
    order = e.trainable_arrays()
    return {k: grads[k] for k in order}


# --- optimizer ---------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, config: TrainConfig, t: int | None = None):
    """Bias-corrected Adam, updating ``params`` arrays in place."""
    state.t = state.t + 1 if t is None else t
    b1, b2, lr, eps = config.adam_beta1, config.adam_beta2, config.learning_rate, config.adam_eps
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name].astype(p.dtype)
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= p.dtype.type(b1)
        m += p.dtype.type(1.0 - b1) * g
        v *= p.dtype.type(b2)
        v += p.dtype.type(1.0 - b2) * (g * g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return params, state


# --- datasets ----------------------------------------------------------------

@dataclass
class DatasetManifest:
    root: Path
    entries: list  # (split, relative path, label int or tuple of 0/1)
    modality: Modality
    dims: tuple
    num_classes: int
    multi_label: bool

    def split(self, name: str):
        rows = [(p, y) for s, p, y in self.entries if s == name]
        return rows

    def load(self, name: str):
        """``(inputs, labels)`` for one split, tensors read from ``.uten`` files."""
        rows = self.split(name)
        if not rows:
            raise InputError(f"split {name!r} is empty")
        inputs = [nx.load_uten(self.root / p) for p, _ in rows]
        if self.multi_label:
            labels = np.array([y for _, y in rows], dtype=np.int64).reshape(len(rows), self.num_classes)
        else:
            labels = np.array([y for _, y in rows], dtype=np.int64)
        return inputs, labels


def _parse_label(text: str):
    text = text.strip()
    if ";" in text:
        vals = tuple(int(t) for t in text.split(";"))
        if any(v not in (0, 1) for v in vals):
            raise InputError(f"multi-label vector must be 0/1: {text!r}")
        return vals
    return int(text)


def read_manifest(path, num_classes: int | None = None) -> DatasetManifest:
    path = Path(path)
    root = path.parent
    entries = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(reader.fieldnames) < {"split", "path", "label"}:
            raise InputError(f"{path}: expected columns split,path,label")
        for row in reader:
            entries.append((row["split"].strip(), row["path"].strip(), _parse_label(row["label"])))
    if not entries:
        raise InputError(f"{path}: manifest has no entries")
    multi = isinstance(entries[0][2], tuple)
    if multi:
        K = len(entries[0][2])
        if any(not isinstance(y, tuple) or len(y) != K for _, _, y in entries):
            raise InputError(f"{path}: inconsistent multi-label vector lengths")
    else:
        K = max(y for _, _, y in entries) + 1
        if any(y < 0 for _, _, y in entries):
            raise InputError(f"{path}: negative label")
    if num_classes is not None:
        if (multi and num_classes != K) or (not multi and num_classes < K):
            raise InputError(f"{path}: labels incompatible with num_classes={num_classes}")
        K = num_classes
    first = nx.load_uten(root / entries[0][1])
    modality = Modality.TWO_D if first.ndim == 3 else Modality.THREE_D
    if first.ndim not in (3, 4):
        raise InputError(f"{path}: tensors must be HxWxC or DxHxWxC, got {first.shape}")
    return DatasetManifest(root, entries, modality, tuple(first.shape), K, multi)


def synth_dataset(out_dir, num_classes: int = 2, modality="2d", dims=None, seed: int = 0,
                  n_train: int = 200, n_val: int = 50, n_test: int = 50, noise: float = 0.1) -> Path:
    """Write a linearly separable synthetic set and its ``manifest.csv``.

    Class k has constant intensity ``-0.5 + k/(K-1)`` (so +-0.5 for two
    classes) plus Gaussian noise; labels cycle through the classes.
    """
    modality = Modality.parse(modality)
    if num_classes < 2:
        raise InputError("synthetic sets need at least two classes")
    if dims is None:
        dims = (16, 16, 1) if modality is Modality.TWO_D else (8, 8, 8, 1)
    dims = tuple(int(v) for v in dims)
    if len(dims) != (3 if modality is Modality.TWO_D else 4):
        raise InputError(f"dims {dims} do not match modality {modality.name}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    means = [-0.5 + k / (num_classes - 1) for k in range(num_classes)]
    rows = []
    for split, count in (("train", n_train), ("val", n_val), ("test", n_test)):
        if count <= 0:
            continue
        rng = Xoshiro(mix_seed(seed, "synth", split))
        (out / split).mkdir(exist_ok=True)
        for i in range(count):
            label = i % num_classes
            x = means[label] + rng.normal(dims, noise, dtype=np.float32)
            rel = f"{split}/{i:05d}.uten"
            nx.save_uten(out / rel, x.astype(np.float32))
            rows.append((split, rel, label))
    with open(out / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["split", "path", "label"])
        w.writerows(rows)
    return out / "manifest.csv"


# --- training loop -----------------------------------------------------------

def predict_scores(bb: Backbone, e: Expert, inputs=None, seqs=None, batch_size: int = 64) -> np.ndarray:
    total = len(seqs) if seqs is not None else len(inputs)
    out = []
    for i in range(0, total, batch_size):
        tape = forward(bb, e, None if inputs is None else inputs[i:i + batch_size],
                       None if seqs is None else seqs[i:i + batch_size], record=False)
        out.append(tape.scores)
    return np.concatenate(out)


def validation_metric(scores: np.ndarray, labels: np.ndarray, mode: HeadMode) -> float:
    """Accuracy for single-label heads, mean per-label AUC for multi-label heads."""
    if mode is HeadMode.SIGMOID_MULTI_LABEL:
        return per_label_auc(scores, labels)[1]
    preds = [decide(s, mode) for s in scores]
    return accuracy(preds, labels)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_metric: float
    val_metric: float


def train_expert(manifest: DatasetManifest, backbone: Backbone, config: TrainConfig,
                 task_id: str = "task", class_names=None, log=None):
    """Train one expert; returns ``(best_expert, history)``.

    Epoch 0 is the untrained expert. The checkpoint with the highest
    validation metric wins (earliest on ties).
    """
    train_x, train_y = manifest.load("train")
    val_x, val_y = manifest.load("val")
    mode = HeadMode.SIGMOID_MULTI_LABEL if manifest.multi_label else HeadMode.SOFTMAX_SINGLE_LABEL
    if (config.loss_mode == "binary_cross_entropy") != manifest.multi_label:
        raise InputError(f"loss_mode {config.loss_mode} does not match the manifest's label type")
    e = new_expert(task_id, backbone, config.rank, manifest.num_classes, manifest.modality, mode,
                   class_names, seed=config.seed,
                   train_3d_embedding=config.train_3d_embedding and manifest.modality is Modality.THREE_D)
    frozen_embed = e.embed3d is None
    train_seqs = embed_inputs(backbone, e, train_x)[0] if frozen_embed else None
    val_seqs = embed_inputs(backbone, e, val_x)[0] if frozen_embed else None

    def evaluate(x, seqs, y):
        s = predict_scores(backbone, e, None if seqs is not None else x, seqs)
        return batch_loss(s, y, mode), validation_metric(s, y, mode)

    loss0, tr0 = evaluate(train_x, train_seqs, train_y)
    best_metric = evaluate(val_x, val_seqs, val_y)[1]
    history = [EpochRecord(0, loss0, tr0, best_metric)]
    if log:
        log(history[-1])
    best = e.copy()
    params = e.trainable_arrays()
    state = AdamState()
    n = len(train_x)
    for epoch in range(1, config.epochs + 1):
        order = Xoshiro(config.seed ^ epoch).permutation(n)
        losses = []
        for bi, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            tape = forward(backbone, e, [train_x[i] for i in idx],
                           None if train_seqs is None else [train_seqs[i] for i in idx])
            loss = batch_loss(tape.scores, train_y[idx], mode)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {bi}")
            losses.append(loss * len(idx))
            grads = backward(tape, e, backbone, train_y[idx])
            adam_step(params, grads, state, config)
        _, tr_metric = evaluate(train_x, train_seqs, train_y) if log else (None, float("nan"))
        val_metric = evaluate(val_x, val_seqs, val_y)[1]
        history.append(EpochRecord(epoch, sum(losses) / n, tr_metric, val_metric))
        if log:
            log(history[-1])
        if val_metric > best_metric:
            best_metric = val_metric
            best = e.copy()
    return best, history


# --- gradient verification ---------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    per_tensor: dict
    coords_checked: int

    def passed(self, tolerance: float = 1e-4) -> bool:
        return self.max_rel_error < tolerance


def grad_check(expert: Expert, backbone: Backbone, inputs, labels, step: float = 1e-4,
               coords_per_tensor: int = 64, seed: int = 0, abs_tol: float = 1e-8) -> GradCheckReport:
    """Compare analytic gradients with central differences, all in double precision.

    For each trainable tensor up to ``coords_per_tensor`` coordinates (all of
    them for smaller tensors) are sampled. The error at a coordinate is
    ``|g - f| / max(|g|, |f|)``; coordinates where both magnitudes are below
    ``abs_tol`` count as exact when ``|g - f| <= abs_tol``.
    """
    bb = backbone.astype(np.float64)
    e = expert.copy(np.float64)
    labels = np.asarray(labels)
    inputs = [np.asarray(x, dtype=np.float64) for x in inputs]
    analytic = backward(forward(bb, e, inputs), e, bb, labels)
    rng = Xoshiro(mix_seed(seed, "gradcheck"))
    params = e.trainable_arrays()
    per_tensor, worst, total = {}, 0.0, 0
    for name, arr in params.items():
        flat = arr.reshape(-1)
        if flat.size <= coords_per_tensor:
            picks = np.arange(flat.size)
        else:
            picks = np.sort(rng.permutation(flat.size)[:coords_per_tensor])
        g_flat = analytic[name].reshape(-1)
        t_worst = 0.0
        for j in picks:
            orig = flat[j]
            flat[j] = orig + step
            up = loss_value(bb, e, inputs, labels)
            flat[j] = orig - step
            down = loss_value(bb, e, inputs, labels)
            flat[j] = orig
            fd = (up - down) / (2 * step)
            g = float(g_flat[j])
            scale = max(abs(g), abs(fd))
            if scale < abs_tol:
                err = 0.0 if abs(g - fd) <= abs_tol else math.inf
            else:
                err = abs(g - fd) / scale
            t_worst = max(t_worst, err)
        per_tensor[name] = t_worst
        worst = max(worst, t_worst)
        total += len(picks)
    if not math.isfinite(worst) and worst != math.inf:
        raise NumericError("gradient check produced a non-finite error")
    return GradCheckReport(worst, per_tensor, total)
