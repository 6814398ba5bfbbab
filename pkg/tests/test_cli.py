import json

import numpy as np
import pytest

from unicad.backbone import load_backbone
from unicad.cli import expert_summary, main
from unicad.experts import load_expert
from unicad.numerics import save_uten

from oracles import vit_param_count

TOY_FLAGS = ["--dim", "32", "--blocks", "2", "--heads", "4", "--mlp", "64", "--patch2d", "4",
             "--channels2d", "1", "--max-2d", "16", "--patch3d", "4", "--channels3d", "1", "--max-3d", "8"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture
def workspace(tmp_path, capsys):
    bb = tmp_path / "bb.ucbb"
    assert run(capsys, "init-backbone", *TOY_FLAGS, "--seed", 5, "--out", bb)[0] == 0
    assert run(capsys, "synth-dataset", "--out", tmp_path / "ds2", "--train", 16, "--val", 8, "--test", 0)[0] == 0
    assert run(capsys, "synth-dataset", "--modality", "3d", "--out", tmp_path / "ds3",
               "--train", 16, "--val", 8, "--test", 0)[0] == 0
    reg = tmp_path / "reg"
    for task, ds in (("two", "ds2"), ("three", "ds3")):
        code, _, err = run(capsys, "train", "--backbone", bb, "--registry", reg, "--manifest",
                           tmp_path / ds / "manifest.csv", "--task-id", task, "--epochs", 2, "--batch-size", 8)
        assert code == 0, err
    return tmp_path


def test_init_backbone_param_count(tmp_path, capsys):
    code, out, _ = run(capsys, "init-backbone", *TOY_FLAGS, "--out", tmp_path / "a.ucbb")
    assert code == 0
    expect = vit_param_count(32, 2, 64, 4, 1, 16, 64, 8)
    assert f"params       {expect}" in out
    assert load_backbone(tmp_path / "a.ucbb").param_count() == expect


def test_init_backbone_same_seed_same_fingerprint(tmp_path, capsys):
    outs = [run(capsys, "init-backbone", *TOY_FLAGS, "--seed", 7, "--out", tmp_path / f"{i}.ucbb")[1]
            for i in range(2)]
    fp = [line for line in outs[0].splitlines() if line.startswith("fingerprint")]
    assert fp and fp[0] in outs[1]
    assert (tmp_path / "0.ucbb").read_bytes() == (tmp_path / "1.ucbb").read_bytes()
    other = run(capsys, "init-backbone", *TOY_FLAGS, "--seed", 8, "--out", tmp_path / "2.ucbb")[1]
    assert fp[0] not in other


def test_init_backbone_rejects_bad_heads(tmp_path, capsys):
    code, _, err = run(capsys, "init-backbone", "--dim", 30, "--heads", 4, "--out", tmp_path / "x.ucbb")
    assert code == 2 and "error" in err


def test_global_flags_after_subcommand(workspace, capsys):
    x = workspace / "x.uten"
    save_uten(x, np.full((8, 8, 1), 0.5, np.float32))
    code, out, err = run(capsys, "infer", "--input", x, "--task-id", "two",
                         "--backbone", workspace / "bb.ucbb", "--registry", workspace / "reg")
    assert code == 0, err
    assert out.startswith("task     two")


def test_registry_from_environment(workspace, capsys, monkeypatch):
    monkeypatch.setenv("UNICAD_HOME", str(workspace / "reg"))
    x = workspace / "v.uten"
    save_uten(x, np.full((8, 8, 8, 1), -0.5, np.float32))
    code, out, _ = run(capsys, "--backbone", workspace / "bb.ucbb", "infer", "--input", x, "--task-id", "three")
    assert code == 0 and "label" in out


def test_train_conflict_exits_3(workspace, capsys):
    code, _, err = run(capsys, "train", "--backbone", workspace / "bb.ucbb", "--registry", workspace / "reg",
                       "--manifest", workspace / "ds2" / "manifest.csv", "--task-id", "two", "--epochs", 1)
    assert code == 3 and "already exists" in err


def test_infer_unknown_task_exits_2(workspace, capsys):
    x = workspace / "x.uten"
    save_uten(x, np.zeros((4, 4, 1), np.float32))
    code = run(capsys, "infer", "--backbone", workspace / "bb.ucbb", "--registry", workspace / "reg",
               "--input", x, "--task-id", "nope")[0]
    assert code == 2


def test_missing_backbone_file_exits_4(tmp_path, capsys):
    code = run(capsys, "infer", "--backbone", tmp_path / "none.ucbb", "--registry", tmp_path,
               "--input", tmp_path / "x.uten", "--task-id", "t")[0]
    assert code == 4


def test_flow_command(workspace, capsys):
    rows = []
    for i in range(10):
        mod = "two" if i % 3 else "three"
        shape = (8, 12, 1) if mod == "two" else (4, 8, 8, 1)
        save_uten(workspace / f"in{i}.uten", np.full(shape, 0.1 * i, np.float32))
        rows.append(f"q{i},{mod},in{i}.uten")
    rows.append("q10,ghost,in0.uten")
    (workspace / "flow.csv").write_text("request_id,task_id,input_path\n" + "\n".join(rows) + "\n")
    code, out, err = run(capsys, "flow", "--backbone", workspace / "bb.ucbb", "--registry", workspace / "reg",
                         "--requests", workspace / "flow.csv", "--batch-size", 4,
                         "--out", workspace / "pred.csv", "--stats", workspace / "stats.json")
    assert code == 0, err
    lines = (workspace / "pred.csv").read_text().splitlines()
    assert len(lines) == 12 and lines[-1].startswith("q10,ghost,ERROR,")
    stats = json.loads((workspace / "stats.json").read_text())
    assert stats["total_requests"] == 11 and stats["micro_batch_count"] == 3
    assert "wall_time" not in stats and "wall_time" in json.loads(out)


def test_empty_flow(workspace, capsys):
    (workspace / "empty.csv").write_text("request_id,task_id,input_path\n")
    code = run(capsys, "flow", "--backbone", workspace / "bb.ucbb", "--registry", workspace / "reg",
               "--requests", workspace / "empty.csv", "--out", workspace / "p.csv",
               "--stats", workspace / "s.json")[0]
    assert code == 0
    assert (workspace / "p.csv").read_text().splitlines() == ["request_id,task_id,top_label,score_vector"]
    stats = json.loads((workspace / "s.json").read_text())
    assert stats["total_requests"] == 0 and stats["micro_batch_count"] == 0


def test_dear_fixture(capsys):
    code, out, _ = run(capsys, "dear")
    assert code == 0
    values = dict(line.rsplit(": ", 1) for line in out.splitlines())
    expected = {"UniCAD": 1.010, "ViT (fine-tuned)": 0.204, "ViT (linear probing)": 0.857, "ResNet50": 0.441}
    for name, value in expected.items():
        assert abs(float(values[name]) - value) <= 0.01


def test_dear_custom_csv(tmp_path, capsys):
    (tmp_path / "d.csv").write_text("task_id,acc_m,acc_baseline,mem_m\na,0.9,0.9,0.46\nb,0.9,0.9,0.46\n")
    code, out, _ = run(capsys, "dear", "--csv", tmp_path / "d.csv")
    # equal accuracy, memory equal to one baseline model for two tasks: 1 / (0.92 / 1.84)
    assert code == 0 and out.strip() == "2.000"


def test_expert_inspect_matches_train_summary(workspace, capsys):
    e = load_expert(workspace / "reg" / "two.ucex")
    code, out, _ = run(capsys, "expert", "inspect", workspace / "reg" / "two.ucex",
                       "--backbone", workspace / "bb.ucbb")
    assert code == 0
    assert out.strip() == expert_summary(e, load_backbone(workspace / "bb.ucbb"))
    assert "lora_params    1024" in out  # 2 blocks * 4 * 32 * 4


def test_corrupt_expert_exits_4(workspace, capsys):
    data = bytearray((workspace / "reg" / "two.ucex").read_bytes())
    data[20] ^= 0xFF
    (workspace / "bad.ucex").write_bytes(bytes(data))
    assert run(capsys, "expert", "inspect", workspace / "bad.ucex")[0] == 4


def test_synth_dataset_reproducible(tmp_path, capsys):
    for name in ("a", "b"):
        run(capsys, "synth-dataset", "--seed", 3, "--dims", "8x8x1", "--train", 4, "--val", 2, "--test", 2,
            "--out", tmp_path / name)
    for f in sorted((tmp_path / "a").rglob("*.*")):
        assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()
