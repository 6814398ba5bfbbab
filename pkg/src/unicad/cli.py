"""``unicad`` command line.

Exit codes: 0 success, 2 usage or validation, 3 conflict, 4 I/O or codec,
5 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import engine
from .backbone import BackboneConfig, init_random_backbone, load_backbone, save_backbone
from .errors import CodecError, ConflictError, InputError, UnicadError
from .evaluation import DearInputs, dear
from .experts import Registry, count_trainable_ratio, load_expert, save_expert
from .numerics import dtype_for, load_uten
from .trainer import TrainConfig, read_manifest, synth_dataset, train_expert
from .uel import PatchSpec2D, PatchSpec3D

EXIT_OK, EXIT_USAGE, EXIT_CONFLICT, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4, 5
# Global flags may appear before or after the subcommand, so they default to
# SUPPRESS in the parser and are filled in here.
GLOBAL_DEFAULTS = {"backbone": None, "registry": None, "seed": 0, "precision": "single", "threads": 1}


def _dims(text: str, n: int) -> tuple[int, ...]:
    parts = [int(p) for p in text.lower().replace("x", ",").split(",") if p]
    if len(parts) == 1:
        parts *= n
    if len(parts) != n or min(parts) <= 0:
        raise argparse.ArgumentTypeError(f"expected {n} positive sizes, got {text!r}")
    return tuple(parts)


def _dims2(text):
    return _dims(text, 2)


def _dims3(text):
    return _dims(text, 3)


def _registry_dir(args) -> Path | None:
    d = getattr(args, "registry", None) or os.environ.get("UNICAD_HOME")
    return Path(d) if d else None


def _need_backbone(args):
    if not getattr(args, "backbone", None):
        raise InputError("--backbone is required for this command")
    path = Path(args.backbone)
    if not path.is_file():
        raise CodecError(f"backbone file not found: {path}")
    bb = load_backbone(path)
    if getattr(args, "precision", "single") == "double":
        bb = bb.astype(dtype_for("double"))
    return bb


def _load_registry(args, bb) -> Registry:
    d = _registry_dir(args)
    if d is None:
        raise InputError("no registry: pass --registry or set UNICAD_HOME")
    if not d.is_dir():
        raise CodecError(f"registry directory not found: {d}")
    return Registry.from_dir(bb, d)


def expert_summary(e, bb=None) -> str:
    lines = [
        f"task_id        {e.task_id}",
        f"modality       {e.modality.name.lower()}",
        f"head_mode      {e.head_mode.name.lower()}",
        f"rank           {e.rank}",
        f"classes        {e.num_classes} ({', '.join(e.class_names)})",
        f"d x blocks     {e.d} x {e.num_blocks}",
        f"A/B shapes     A {e.rank}x{e.d}, B {e.d}x{e.rank} (Q and V per block)",
        f"head shape     {e.num_classes}x{e.d} + {e.num_classes}",
        f"3d embedding   {'trained override' if e.embed3d is not None else 'shared'}",
        f"fingerprint    {'none' if e.backbone_fingerprint is None else f'{e.backbone_fingerprint:#010x}'}",
        f"lora_params    {e.lora_param_count()}",
        f"head_params    {e.head_param_count()}",
    ]
    if bb is not None:
        r = count_trainable_ratio(e, bb)
        lines += [f"backbone_params {r['backbone_params']}",
                  f"ratio          {100 * r['ratio']:.4f}% (lora only)",
                  f"ratio_w_head   {100 * r['ratio_with_head']:.4f}% (lora + head)"]
    return "\n".join(lines)


# --- commands ----------------------------------------------------------------

def cmd_init_backbone(args):
    try:
        cfg = BackboneConfig(args.dim, args.blocks, args.heads, args.mlp, args.eps, args.seed)
        s2 = PatchSpec2D(*args.patch2d, args.channels2d, *args.max_2d)
        s3 = PatchSpec3D(*args.patch3d, args.channels3d, *args.max_3d)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    bb = init_random_backbone(cfg, s2, s3)
    save_backbone(bb, args.out)
    print(f"params       {bb.param_count()}")
    print(f"fingerprint  {bb.fingerprint():#010x}")
    print(f"wrote        {args.out}")
    return EXIT_OK


def cmd_train(args):
    bb = _need_backbone(args)
    reg_dir = _registry_dir(args)
    if reg_dir is not None and reg_dir.is_dir():
        if args.task_id in Registry.from_dir(bb, reg_dir):
            raise ConflictError(f"task id {args.task_id!r} already exists in {reg_dir}")
    manifest = read_manifest(args.manifest, args.classes)
    config = TrainConfig(learning_rate=args.lr, epochs=args.epochs, batch_size=args.batch_size,
                         seed=args.seed, rank=args.rank,
                         loss_mode="binary_cross_entropy" if manifest.multi_label else "cross_entropy",
                         train_3d_embedding=args.train_3d_embedding)
    print(f"{'epoch':>5} {'train_loss':>10} {'train_metric':>12} {'val_metric':>10}")

    def log(rec):
        print(f"{rec.epoch:>5} {rec.train_loss:>10.4f} {rec.train_metric:>12.4f} {rec.val_metric:>10.4f}")

    names = args.class_names.split(",") if args.class_names else None
    expert, history = train_expert(manifest, bb.astype(np.float32), config, args.task_id, names, log)
    out = Path(args.out) if args.out else (reg_dir / f"{args.task_id}.ucex" if reg_dir else None)
    if out is None:
        raise InputError("pass --out or a registry directory")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_expert(expert, out)
    best = max(history, key=lambda r: (r.val_metric, -r.epoch))
    print(f"best epoch   {best.epoch} (val {best.val_metric:.4f})")
    print(expert_summary(expert, bb))
    print(f"wrote        {out}")
    return EXIT_OK


def cmd_infer(args):
    bb = _need_backbone(args)
    reg = _load_registry(args, bb)
    req = engine.TaskRequest("0", args.task_id, load_uten(args.input))
    preds, stats = engine.run_flow([req], engine.RANDOM_FLOW, 1, reg, bb, args.threshold)
    if stats.errors:
        raise InputError(stats.errors[0].message)
    p = preds[0]
    e = reg.lookup(args.task_id)
    label = p.labels if isinstance(p.labels, int) else list(p.labels)
    names = e.class_names[label] if isinstance(label, int) else [e.class_names[k] for k in label]
    print(f"task     {p.task_id}")
    print(f"label    {label} ({names})")
    print(f"scores   {engine.format_scores(p.scores)}")
    return EXIT_OK


def cmd_flow(args):
    bb = _need_backbone(args)
    reg = _load_registry(args, bb)
    requests = engine.read_flow_file(args.requests)
    preds, stats = engine.run_flow(requests, args.mode, args.batch_size, reg, bb,
                                   args.threshold, args.threads)
    engine.write_predictions_csv(args.out, requests, preds, stats.errors)
    if args.stats:
        Path(args.stats).write_text(engine.stats_text(stats) + "\n")
    print(engine.stats_text(stats, with_time=True))
    return EXIT_OK


def _read_dear_csv(path):
    groups: dict[str, list] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"task_id", "acc_m", "acc_baseline", "mem_m"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise InputError(f"{path}: expected columns task_id,acc_m,acc_baseline,mem_m")
        for row in reader:
            groups.setdefault(row.get("system") or "", []).append(row)
    return groups


def cmd_dear(args):
    path = args.csv or resources.files("unicad").joinpath("data/dear_table.csv")
    for system, rows in _read_dear_csv(path).items():
        inputs = DearInputs([float(r["acc_m"]) for r in rows], [float(r["acc_baseline"]) for r in rows],
                            [float(r["mem_m"]) for r in rows], args.mem_baseline, args.k)
        value = dear(inputs)
        print(f"{system}: {value:.3f}" if system else f"{value:.3f}")
    return EXIT_OK


def cmd_expert_inspect(args):
    e = load_expert(args.path)
    bb = _need_backbone(args) if getattr(args, "backbone", None) else None
    print(expert_summary(e, bb))
    return EXIT_OK


def cmd_synth_dataset(args):
    dims = _dims(args.dims, 3 if args.modality == "2d" else 4) if args.dims else None
    path = synth_dataset(args.out, args.classes, args.modality, dims, args.seed,
                         args.train, args.val, args.test, args.noise)
    print(f"wrote {path}")
    return EXIT_OK


# --- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--backbone", default=argparse.SUPPRESS, help="path to a .ucbb backbone")
    common.add_argument("--registry", default=argparse.SUPPRESS,
                        help="directory of .ucex experts (default: $UNICAD_HOME)")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--precision", choices=("single", "double"), default=argparse.SUPPRESS)
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS)

    p = argparse.ArgumentParser(prog="unicad", parents=[common],
                                description="Multi-task ViT serving and low-rank expert training.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("init-backbone", parents=[common], help="write a seeded random backbone")
    s.add_argument("--dim", type=int, default=768)
    s.add_argument("--blocks", type=int, default=12)
    s.add_argument("--heads", type=int, default=12)
    s.add_argument("--mlp", type=int, default=3072)
    s.add_argument("--eps", type=float, default=1e-6)
    s.add_argument("--patch2d", type=_dims2, default=(16, 16))
    s.add_argument("--channels2d", type=int, default=3)
    s.add_argument("--max-2d", type=_dims2, default=(224, 224))
    s.add_argument("--patch3d", type=_dims3, default=(7, 7, 7))
    s.add_argument("--channels3d", type=int, default=1)
    s.add_argument("--max-3d", type=_dims3, default=(28, 28, 28))
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_init_backbone)

    s = sub.add_parser("train", parents=[common], help="train one expert on a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--task-id", required=True)
    s.add_argument("--rank", type=int, default=4)
    s.add_argument("--epochs", type=int, default=100)
    s.add_argument("--lr", type=float, default=3e-4)
    s.add_argument("--batch-size", type=int, default=32)
    s.add_argument("--classes", type=int, default=None)
    s.add_argument("--class-names", default=None, help="comma-separated")
    s.add_argument("--train-3d-embedding", action="store_true")
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", parents=[common], help="classify one .uten input")
    s.add_argument("--input", required=True)
    s.add_argument("--task-id", required=True)
    s.add_argument("--threshold", type=float, default=0.5)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("flow", parents=[common], help="serve a request file")
    s.add_argument("--requests", required=True)
    s.add_argument("--mode", choices=engine.MODES, default=engine.RANDOM_FLOW)
    s.add_argument("--batch-size", type=int, default=32)
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--out", required=True, help="prediction CSV path")
    s.add_argument("--stats", default=None, help="stats JSON path")
    s.set_defaults(func=cmd_flow)

    s = sub.add_parser("dear", parents=[common], help="compute DEAR from a CSV")
    s.add_argument("--csv", default=None, help="defaults to the bundled table fixture")
    s.add_argument("--mem-baseline", type=float, default=0.92)
    s.add_argument("--k", type=float, default=3.0)
    s.set_defaults(func=cmd_dear)

    s = sub.add_parser("expert", parents=[common], help="expert file tools")
    esub = s.add_subparsers(dest="expert_command", required=True)
    i = esub.add_parser("inspect", parents=[common])
    i.add_argument("path")
    i.set_defaults(func=cmd_expert_inspect)

    s = sub.add_parser("synth-dataset", parents=[common], help="write a synthetic separable set")
    s.add_argument("--classes", type=int, default=2)
    s.add_argument("--modality", choices=("2d", "3d"), default="2d")
    s.add_argument("--dims", default=None, help="HxWxC or DxHxWxC")
    s.add_argument("--train", type=int, default=200)
    s.add_argument("--val", type=int, default=50)
    s.add_argument("--test", type=int, default=50)
    s.add_argument("--noise", type=float, default=0.1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth_dataset)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    for key, value in GLOBAL_DEFAULTS.items():
        if not hasattr(args, key):
            setattr(args, key, value)
    try:
        return args.func(args)
    except UnicadError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
