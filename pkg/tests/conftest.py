import numpy as np
import pytest

from unicad.backbone import BackboneConfig, init_random_backbone
from unicad.experts import new_expert
from unicad.uel import PatchSpec2D, PatchSpec3D

TOY_SPEC2D = PatchSpec2D(4, 4, 1, 16, 16)
TOY_SPEC3D = PatchSpec3D(4, 4, 4, 1, 8, 8, 8)

_ACCEPTANCE_LINES: list[str] = []


def toy_backbone(seed=0, d=64, blocks=2, heads=4, mlp=128):
    return init_random_backbone(BackboneConfig(d, blocks, heads, mlp, seed=seed), TOY_SPEC2D, TOY_SPEC3D)


def random_expert(bb, task_id, rank, modality="2d", num_classes=3, head_mode="softmax", seed=0,
                  scale=0.05):
    """Expert with non-zero B and head so that every path contributes."""
    e = new_expert(task_id, bb, rank, num_classes, modality, head_mode, seed=seed)
    rng = np.random.default_rng(seed)
    for blk in e.lora:
        blk.b_q[:] = rng.normal(0, scale, blk.b_q.shape)
        blk.b_v[:] = rng.normal(0, scale, blk.b_v.shape)
    e.head_w[:] = rng.normal(0, 0.5, e.head_w.shape)
    e.head_b[:] = rng.normal(0, 0.1, e.head_b.shape)
    return e


def random_input(rng, modality, spec2d=TOY_SPEC2D, spec3d=TOY_SPEC3D):
    """Random patch-aligned input no larger than the configured maxima."""
    if modality == "2d":
        h = spec2d.patch_h * int(rng.integers(1, spec2d.max_h // spec2d.patch_h + 1))
        w = spec2d.patch_w * int(rng.integers(1, spec2d.max_w // spec2d.patch_w + 1))
        return rng.normal(0, 0.5, (h, w, spec2d.channels)).astype(np.float32)
    dims = [p * int(rng.integers(1, m // p + 1)) for p, m in zip(spec3d.patch_dims, spec3d.max_dims)]
    return rng.normal(0, 0.5, (*dims, spec3d.channels)).astype(np.float32)


@pytest.fixture(scope="session")
def toy_bb():
    return toy_backbone()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def acceptance_report():
    def record(number, title, passed, detail=""):
        mark = "PASS" if passed else "FAIL"
        _ACCEPTANCE_LINES.append(f"[{mark}] criterion {number:>2}: {title}" + (f" ({detail})" if detail else ""))
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
