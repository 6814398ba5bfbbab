"""Multi-task batch processing over one shared backbone.

Requests for any mix of tasks and modalities are chunked in arrival order into
micro-batches. Each micro-batch is padded to its own longest sequence and its
own largest expert rank, then run through the backbone in a single pass with
every row carrying its own expert's low-rank matrices.
"""

from __future__ import annotations

import csv
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from . import numerics as nx
from .backbone import Backbone, LoraDeltaSet, backbone_forward
from .errors import UnicadError
from .experts import BYTES_PER_PARAM, Expert, HeadMode, Registry, max_rank, pad_to_rank
from .uel import Modality, StandardizedBatch, TokenSequence, embed_with_patches, standardize_batch

RANDOM_FLOW = "random_flow"
TASK_ORDERED = "task_ordered"
MODES = (RANDOM_FLOW, TASK_ORDERED)


@dataclass
class TaskRequest:
    request_id: str
    task_id: str
    input: np.ndarray | None
    error: str | None = None  # set when the input could not be loaded


@dataclass
class RequestError:
    request_id: str
    task_id: str
    message: str


@dataclass(eq=False)
class MicroBatch:
    batch: StandardizedBatch
    deltas: list[LoraDeltaSet]
    experts: list[Expert]
    request_ids: list[str]
    r_max: int

    @property
    def size(self) -> int:
        return self.batch.n


@dataclass
class Prediction:
    request_id: str
    task_id: str
    scores: np.ndarray
    labels: int | tuple[int, ...]

    @property
    def top_label(self) -> int:
        return int(np.argmax(self.scores))


@dataclass
class FlowStats:
    total_requests: int = 0
    micro_batch_count: int = 0
    batch_sizes: list[int] = field(default_factory=list)
    r_max: list[int] = field(default_factory=list)
    L_max: list[int] = field(default_factory=list)
    resident_param_bytes: int = 0
    error_count: int = 0
    wall_time: float = 0.0
    errors: list[RequestError] = field(default_factory=list)

    KEYS = ("total_requests", "micro_batch_count", "batch_sizes", "r_max", "L_max",
            "resident_param_bytes", "error_count")

    def to_dict(self, with_time: bool = False) -> dict:
        out = {k: getattr(self, k) for k in self.KEYS}
        if with_time:
            out["wall_time"] = self.wall_time
        return out


# --- collation ---------------------------------------------------------------

def _embed_request(req: TaskRequest, e: Expert, bb: Backbone) -> TokenSequence:
    emb = bb.embedding
    if e.embed3d is not None and e.modality is Modality.THREE_D:
        emb = emb.with_3d(*e.embed3d)
    x = np.asarray(req.input)
    want = 3 if e.modality is Modality.TWO_D else 4
    if x.ndim != want:
        raise UnicadError(f"task {e.task_id!r} expects a {want}-D {e.modality.name} input, got shape {x.shape}")
    return embed_with_patches(x, e.modality, bb.spec2d, bb.spec3d, emb)[0]


def build_micro_batch(items: list[tuple[TaskRequest, Expert, TokenSequence]], num_blocks: int) -> MicroBatch:
    experts = [e for _, e, _ in items]
    r_max = max_rank(experts)
    padded = [pad_to_rank(e, r_max) for e in experts]
    deltas = [LoraDeltaSet.stack([p[b].arrays() for p in padded]) for b in range(num_blocks)]
    batch = standardize_batch([s for _, _, s in items])
    return MicroBatch(batch, deltas, experts, [r.request_id for r, _, _ in items], r_max)


def prepare(requests, registry: Registry, backbone: Backbone):
    """Resolve and embed every request. Returns ``(ready, errors)`` in intake order."""
    ready, errors = [], []
    for req in requests:
        if req.error is not None:
            errors.append(RequestError(req.request_id, req.task_id, req.error))
            continue
        try:
            e = registry.lookup(req.task_id)
            seq = _embed_request(req, e, backbone)
        except UnicadError as exc:
            errors.append(RequestError(req.request_id, req.task_id, str(exc)))
            continue
        ready.append((req, e, seq))
    return ready, errors


def collate(requests, registry: Registry, backbone: Backbone, batch_size: int):
    """Chunk resolvable requests in arrival order into micro-batches of at most ``batch_size``.

    Returns ``(micro_batches, errors)``; unresolvable or malformed requests are
    reported in ``errors`` and skipped.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    ready, errors = prepare(requests, registry, backbone)
    L = backbone.config.num_blocks
    batches = [build_micro_batch(ready[i:i + batch_size], L) for i in range(0, len(ready), batch_size)]
    return batches, errors


def forward_batch(mb: MicroBatch, backbone: Backbone) -> np.ndarray:
    return backbone_forward(backbone, mb.batch, mb.deltas)


def head_logits(cls: np.ndarray, e: Expert) -> np.ndarray:
    cls2 = np.atleast_2d(cls)
    z = nx.linear(cls2, nx.transpose(e.head_w).astype(cls2.dtype), e.head_b.astype(cls2.dtype))
    return z if cls.ndim == 2 else z[0]


def head_scores(z: np.ndarray, mode: HeadMode) -> np.ndarray:
    if mode is HeadMode.SIGMOID_MULTI_LABEL:
        return expit(z)
    return nx.softmax_masked(z, np.ones(z.shape[-1], dtype=bool))


def classify(cls: np.ndarray, e: Expert) -> np.ndarray:
    """Class scores for one CLS vector: softmax or element-wise sigmoid of the head logits."""
    return head_scores(head_logits(cls, e), e.head_mode)


def decide(scores: np.ndarray, mode: HeadMode, threshold: float = 0.5):
    if mode is HeadMode.SIGMOID_MULTI_LABEL:
        return tuple(int(k) for k in np.flatnonzero(scores >= threshold))
    return int(np.argmax(scores))  # first maximum wins ties


def predict_batch(mb: MicroBatch, backbone: Backbone, threshold: float = 0.5) -> list[Prediction]:
    cls = forward_batch(mb, backbone)
    preds = []
    for i, (rid, e) in enumerate(zip(mb.request_ids, mb.experts)):
        s = classify(cls[i], e)
        preds.append(Prediction(rid, e.task_id, s, decide(s, e.head_mode, threshold)))
    return preds


# --- memory accounting -------------------------------------------------------

def resident_param_bytes(backbone: Backbone, loaded_experts) -> int:
    """Weight bytes held for one shared backbone plus every loaded expert."""
    return BYTES_PER_PARAM * (backbone.param_count() + sum(e.param_count() for e in loaded_experts))


def per_task_model_bytes(backbone: Backbone, num_tasks: int) -> int:
    """Weight bytes when each task keeps its own full fine-tuned copy."""
    return num_tasks * BYTES_PER_PARAM * backbone.param_count()


# --- flows -------------------------------------------------------------------

def _order(ready, mode):
    if mode == RANDOM_FLOW:
        return [ready]
    groups: dict[str, list] = {}
    for item in ready:
        groups.setdefault(item[0].task_id, []).append(item)
    return list(groups.values())


def run_flow(requests, mode: str, batch_size: int, registry: Registry, backbone: Backbone,
             threshold: float = 0.5, threads: int = 1):
    """Serve a request flow. Returns ``(predictions, stats)``.

    ``random_flow`` batches in arrival order across tasks; ``task_ordered``
    batches each task separately, as a deployment of per-task models would.
    Predictions come back in intake order; failures are listed in ``stats.errors``.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    requests = list(requests)
    t0 = time.perf_counter()
    ready, errors = prepare(requests, registry, backbone)
    L = backbone.config.num_blocks
    batches = []
    for group in _order(ready, mode):
        batches += [build_micro_batch(group[i:i + batch_size], L) for i in range(0, len(group), batch_size)]
    if threads > 1 and len(batches) > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(lambda mb: predict_batch(mb, backbone, threshold), batches))
    else:
        results = [predict_batch(mb, backbone, threshold) for mb in batches]
    by_id = {p.request_id: p for chunk in results for p in chunk}
    predictions = [by_id[req.request_id] for req, _, _ in ready]
    stats = FlowStats(
        total_requests=len(requests),
        micro_batch_count=len(batches),
        batch_sizes=[mb.size for mb in batches],
        r_max=[mb.r_max for mb in batches],
        L_max=[mb.batch.L_max for mb in batches],
        resident_param_bytes=resident_param_bytes(backbone, registry.experts.values()),
        error_count=len(errors),
        wall_time=time.perf_counter() - t0,
        errors=errors,
    )
    return predictions, stats


# --- flow files --------------------------------------------------------------

def read_flow_file(path) -> list[TaskRequest]:
    """Parse ``request_id,task_id,input_path`` lines; relative paths resolve against the file."""
    from .numerics import load_uten

    path = Path(path)
    base = path.parent
    requests = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or not "".join(row).strip() or row[0].startswith("#"):
                continue
            if row[0] == "request_id" and lineno == 1:
                continue
            if len(row) != 3:
                requests.append(TaskRequest(f"line{lineno}", "", None, f"line {lineno}: expected 3 fields"))
                continue
            rid, tid, ipath = (f.strip() for f in row)
            full = Path(ipath) if Path(ipath).is_absolute() else base / ipath
            try:
                requests.append(TaskRequest(rid, tid, load_uten(full)))
            except (OSError, UnicadError) as exc:
                requests.append(TaskRequest(rid, tid, None, f"cannot load input: {exc}"))
    return requests


def format_scores(scores) -> str:
    return ";".join(f"{float(s):.7g}" for s in scores)


def write_predictions_csv(path, requests, predictions, errors) -> None:
    """One row per request in intake order; failed requests carry ``ERROR`` and the message."""
    preds = {p.request_id: p for p in predictions}
    errs = {e.request_id: e for e in errors}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["request_id", "task_id", "top_label", "score_vector"])
        for req in requests:
            if req.request_id in preds:
                p = preds[req.request_id]
                label = p.labels if isinstance(p.labels, int) else ";".join(map(str, p.labels))
                w.writerow([p.request_id, p.task_id, label, format_scores(p.scores)])
            elif req.request_id in errs:
                e = errs[req.request_id]
                w.writerow([e.request_id, e.task_id, "ERROR", e.message])


def stats_text(stats: FlowStats, with_time: bool = False) -> str:
    return json.dumps(stats.to_dict(with_time), indent=2, sort_keys=False)
