import hashlib

import pytest

from spectra.checkpoint import load_checkpoint
from spectra.cli import format_ablation, main
from spectra.config import RunConfig
from spectra.data import load_cube
from spectra.evaluation import read_ppm

SMALL = ["--set", "patch_size=5", "--set", "embed_dim=8", "--set", "heads=2", "--set", "mlp_hidden=8",
         "--set", "train_fraction=0.05", "--set", "batch_size=20"]


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def scene(tmp_path_factory):
    out = tmp_path_factory.mktemp("scene")
    assert main(["synth", "--height", "12", "--width", "12", "--bands", "10", "--classes", "3", "--out", str(out)]) == 0
    return out / "scene.manifest"


def test_synth_defaults(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path)]) == 0
    assert sorted(p.name for p in tmp_path.iterdir()) == ["scene.bsq", "scene.manifest", "scene_gt.u16"]
    cube, gt = load_cube(tmp_path / "scene.manifest")
    assert cube.data.shape == (20, 32, 32) and gt.n_classes == 4
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 5 and sum(int(line.split()[-1]) for line in lines[1:]) == 32 * 32


def test_synth_is_byte_identical_per_seed(tmp_path):
    for name in ("a", "b"):
        assert main(["synth", "--seed", "3", "--out", str(tmp_path / name)]) == 0
    for f in ("scene.bsq", "scene.manifest", "scene_gt.u16"):
        assert digest(tmp_path / "a" / f) == digest(tmp_path / "b" / f)


def test_synth_too_many_classes(tmp_path):
    assert main(["synth", "--height", "2", "--width", "2", "--classes", "5", "--out", str(tmp_path)]) == 2


def test_bad_arguments_exit_2(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--case", "9"])
    assert exc.value.code == 2
    assert main(["train", "--set", "nonsense=1", "--out", str(tmp_path)]) == 2
    assert main(["train", "--out", str(tmp_path)]) == 2  # no data manifest


def test_missing_manifest_is_a_runtime_failure(tmp_path):
    assert main(["train", "--data", str(tmp_path / "none.manifest"), "--out", str(tmp_path)]) == 1


def test_train_then_eval(scene, tmp_path, capsys):
    out = tmp_path / "run"
    args = ["--data", str(scene), "--out", str(out), "--epochs", "3", *SMALL]
    assert main(["train", *args]) == 0
    assert {"checkpoint.spck", "train_log.jsonl", "config.txt"} <= {p.name for p in out.iterdir()}
    capsys.readouterr()
    assert main(["eval", "--out", str(out), *SMALL]) == 0
    text = capsys.readouterr().out
    assert "OA(%)" in text and "k x 100" in text
    assert read_ppm(out / "prediction_map.ppm").shape == (12, 12, 3)
    assert (out / "metrics.txt").read_text().startswith("oa")
    assert main(["predict-map", "--out", str(out)]) == 0
    assert read_ppm(out / "full_map.ppm").shape == (12, 12, 3)


def test_train_is_deterministic(scene, tmp_path):
    for name in ("a", "b"):
        assert main(["train", "--data", str(scene), "--out", str(tmp_path / name), "--epochs", "2", *SMALL]) == 0
    assert digest(tmp_path / "a" / "checkpoint.spck") == digest(tmp_path / "b" / "checkpoint.spck")
    model, meta = load_checkpoint(tmp_path / "a" / "checkpoint.spck")
    assert meta["seed"] == "0" and model.config.embed_dim == 8


def test_written_config_reparses(scene, tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--data", str(scene), "--out", str(out), "--epochs", "1", "--seed", "4", *SMALL]) == 0
    cfg = RunConfig.load(out / "config.txt")
    assert cfg.seed == 4 and cfg.embed_dim == 8 and cfg.epochs == 1
    assert RunConfig.loads(cfg.dumps()) == cfg


def test_config_file_with_override(scene, tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(f"data = {scene}\nepochs = 50\nembed_dim = 8\n")
    cfg = RunConfig.load(path).updated({"epochs": "2"})
    assert cfg.epochs == 2 and cfg.data == str(scene)


def test_gradcheck_passes(capsys):
    assert main(["gradcheck", "--case", "5"]) == 0
    assert capsys.readouterr().out.strip().endswith("PASS")


def test_ablate_table(scene, tmp_path, capsys):
    assert main(["ablate", "--data", str(scene), "--out", str(tmp_path), "--epochs", "2", *SMALL]) == 0
    rows = (tmp_path / "ablation.txt").read_text().splitlines()
    assert len(rows) == 6
    assert [int(r.split()[0]) for r in rows[1:]] == [1, 2, 3, 4, 5]
    assert capsys.readouterr().out.endswith((tmp_path / "ablation.txt").read_text())


def test_ablation_table_marks_modules():
    text = format_ablation([{"case": 1, "oa": 0.5, "aa": 0.5, "kappa": 0.0}])
    assert text.splitlines()[1].split()[:5] == ["1", "no", "no", "no", "no"]
