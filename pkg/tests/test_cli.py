import json

import numpy as np
import pytest

from dilo.cli import main
from dilo.config import RunConfig
from dilo.geometry import load_obj
from dilo.latentopt import Stage1Config
from dilo.amortized import Stage2Config

from .conftest import small_net_config


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["synth", "--out", str(data), "--groups", "3", "--deforms", "4", "--points", "64",
                 "--test-groups", "2", "--test-deforms", "2", "--seed", "1"]) == 0
    V = json.loads((data / "manifest.json").read_text())["V"]
    cfg = RunConfig(net=small_net_config(V), stage1=Stage1Config(epochs=3),
                    stage2=Stage2Config(epochs=2, w_dis_z=1e3, w_dis_s=1e3), data_dir=str(data))
    cfg.save(root / "run.json")
    for stage, extra in (("s1", ["train-stage1"]), ("s2", ["train-stage2", "--stage1", str(root / "s1")])):
        assert main(extra + ["--config", str(root / "run.json"), "--out", str(root / stage)]) == 0
    return root, data, V


def test_stage_outputs(pipeline):
    root, _, _ = pipeline
    rows = (root / "s1" / "loss_stage1.csv").read_text().splitlines()
    assert rows[0].startswith("epoch,mean_L1") and len(rows) == 4
    assert len((root / "s2" / "loss_stage2.csv").read_text().splitlines()) == 3
    meta = json.loads((root / "s2" / "meta.json").read_text())
    assert meta["stage"] == 2 and meta["parent"]


def test_transfer_writes_obj(pipeline):
    root, data, V = pipeline
    meshes = sorted((data / "meshes").iterdir())
    out = root / "t.obj"
    assert main(["transfer", "--ckpt", str(root / "s2"), "--shape", str(meshes[0]),
                 "--deform", str(meshes[-1]), "--out", str(out)]) == 0
    mesh = load_obj(out)
    assert mesh.points.shape == (V, 3)
    np.testing.assert_array_equal(mesh.faces, load_obj(meshes[0]).faces)


def test_eval_commands(pipeline, capsys):
    root, _, _ = pipeline
    assert main(["eval-transfer", "--ckpt", str(root / "s2"), "--n-pairs", "5", "--split", "train",
                 "--align", "--allow-reflection", "--out", str(root / "ev")]) == 0
    summary = json.loads((root / "ev" / "summary.json").read_text())
    assert summary["n_pairs"] == 5 and summary["aligned"]
    assert "copy shape" in capsys.readouterr().out
    # held-out poses of this tiny set fall in bins the training split never visits
    assert main(["eval-dscore", "--ckpt", str(root / "s2"), "--out", str(root / "ds")]) == 1
    assert "disjoint" in capsys.readouterr().err
    assert main(["eval-dscore", "--ckpt", str(root / "s2"), "--test-split", "train", "--out", str(root / "ds")]) == 0
    ds = json.loads((root / "ds" / "dscore.json").read_text())
    assert 0.0 <= ds["chance"] <= 1.0 and "d_score" in ds


def test_explain_command(pipeline):
    root, data, V = pipeline
    mesh = sorted((data / "meshes").iterdir())[0]
    assert main(["explain", "--ckpt", str(root / "s2"), "--mesh", str(mesh), "--k", "4",
                 "--samples", "20", "--out", str(root / "ex")]) == 0
    assert len((root / "ex" / "importance.csv").read_text().splitlines()) == V + 1


def test_rerun_is_byte_identical(pipeline):
    root, _, _ = pipeline
    assert main(["train-stage1", "--config", str(root / "run.json"), "--out", str(root / "s1b")]) == 0
    for name in ("params.bin", "latents.bin", "loss_stage1.csv"):
        assert (root / "s1" / name).read_bytes() == (root / "s1b" / name).read_bytes()


def test_exit_codes(pipeline, tmp_path, capsys):
    root, _, _ = pipeline
    with pytest.raises(SystemExit) as exc:
        main(["train-stage1", "--out", str(tmp_path)])  # no dataset
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["no-such-command"])
    assert exc.value.code == 2
    assert main(["transfer", "--ckpt", str(tmp_path / "missing"), "--shape", "a.obj", "--deform", "b.obj",
                 "--out", str(tmp_path / "o.obj")]) == 1
    assert "error" in capsys.readouterr().err
