"""Compare the compiled kernels with the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Times matrix products at shapes that occur in a ViT-base forward pass, plus a
full toy-backbone forward, once per backend. The two backends must agree bit
for bit; any difference is reported.
"""

import argparse
import time

import numpy as np

import unicad.numerics as nx
from unicad import _pykernels
from unicad.backbone import BackboneConfig, backbone_forward, init_random_backbone
from unicad.uel import PatchSpec2D, PatchSpec3D, embed_2d, standardize_batch

try:
    from unicad import _kernels
except ImportError:
    _kernels = None

MATMUL_SHAPES = [(197, 768, 768), (197, 768, 3072), (197, 3072, 768), (197, 768, 4)]


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def forward_case():
    spec2d = PatchSpec2D(16, 16, 3, 224, 224)
    spec3d = PatchSpec3D(7, 7, 7, 1, 28, 28, 28)
    bb = init_random_backbone(BackboneConfig(192, 4, 3, 768), spec2d, spec3d)
    rng = np.random.default_rng(0)
    seqs = [embed_2d(rng.standard_normal((224, 224, 3)).astype(np.float32), spec2d, bb.embedding)
            for _ in range(4)]
    batch = standardize_batch(seqs)
    return lambda: backbone_forward(bb, batch)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    backends = [("python", _pykernels)] + ([("cython", _kernels)] if _kernels else [])
    if _kernels is None:
        print("compiled extension not built; timing the fallback only")
    rng = np.random.default_rng(1)
    print(f"{'case':<28}" + "".join(f"{name:>12}" for name, _ in backends) + f"{'speedup':>10}  bit-equal")
    cases = []
    for m, k, n in MATMUL_SHAPES:
        a = rng.standard_normal((m, k)).astype(np.float32)
        b = rng.standard_normal((k, n)).astype(np.float32)
        cases.append((f"matmul {m}x{k}x{n}", lambda a=a, b=b: nx.matmul(a, b)))
    q = rng.standard_normal((48, 197, 64)).astype(np.float32)
    kt = rng.standard_normal((48, 64, 197)).astype(np.float32)
    cases.append(("bmm 48x197x64x197", lambda: nx.bmm(q, kt)))
    cases.append(("forward d=192 L=4 n=4", forward_case()))
    saved = nx._backend
    try:
        for label, fn in cases:
            timings, outputs = [], []
            for _, mod in backends:
                nx._backend = mod
                t, out = best_of(fn, args.repeat)
                timings.append(t)
                outputs.append(out)
            speedup = f"{timings[0] / timings[-1]:>9.1f}x" if len(timings) > 1 else f"{'-':>10}"
            same = all(o.tobytes() == outputs[0].tobytes() for o in outputs)
            print(f"{label:<28}" + "".join(f"{t * 1e3:>10.1f}ms" for t in timings) + f"{speedup}  {same}")
    finally:
        nx._backend = saved


if __name__ == "__main__":
    main()
