import csv
import time

import numpy as np
import pytest

from orthopreview.cli import SCHEMA, ConfigError, load_config, main
from orthopreview.mesh import Mesh, save_obj
from smoke import ARTIFACTS, chdir, run_smoke


def test_config_defaults_and_overrides(tmp_path):
    cfg = load_config()
    assert cfg.alpha_p == 5000.0 and cfg.epochs == 500 and cfg.augment is True
    path = tmp_path / "c.cfg"
    path.write_text("# comment\nepochs = 7\naugment = false\n\nlr = 0.01  # trailing\n")
    cfg = load_config(path, ["epochs=9"])
    assert cfg.epochs == 9 and cfg.augment is False and cfg.lr == 0.01
    assert cfg.train_config().epochs == 9
    assert set(line.split(" = ")[0] for line in cfg.dump().splitlines()) == set(SCHEMA)


def test_component_seeds_stable_and_distinct():
    cfg = load_config(overrides=["seed=3"])
    assert cfg.component_seed("train") == load_config(overrides=["seed=3"]).component_seed("train")
    assert cfg.component_seed("train") != cfg.component_seed("augment")
    assert cfg.component_seed("train") != load_config(overrides=["seed=4"]).component_seed("train")


@pytest.mark.parametrize("bad", ["nonsense = 1", "epochs = many", "epochs", "dropout = 2.0", "tau_x = 1"])
def test_config_errors(tmp_path, bad):
    path = tmp_path / "c.cfg"
    path.write_text(bad + "\n")
    with pytest.raises(ConfigError):
        load_config(path)


def test_unknown_key_exit_code(tmp_path, capsys):
    with chdir(tmp_path):
        assert main(["build-model", "--set", "colour=blue"]) == 2
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error code=2 kind=config command=build-model")
    assert main(["no-such-command"]) == 2


def test_missing_data_exit_code(tmp_path, capsys):
    with chdir(tmp_path):
        assert main(["train", "--set", "n_modes=16", "--set", "data_dir=absent"]) == 3
    err = capsys.readouterr().err
    assert "kind=data" in err and "absent" in err


def test_evaluate_identical_sets(tmp_path, capsys, model16, rng):
    for d in ("pred", "gt"):
        (tmp_path / d).mkdir()
    for i in range(3):
        mesh = Mesh(model16.template + rng.normal(0, 1, model16.template.shape), model16.triangles)
        save_obj(mesh, tmp_path / "pred" / f"s{i}.obj")
        save_obj(mesh, tmp_path / "gt" / f"s{i}.obj")
    with chdir(tmp_path):
        assert main(["evaluate", "--pred-dir", "pred", "--gt-dir", "gt"]) == 0
    with open(tmp_path / "out" / "evaluate.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["metric", "mean", "min", "max"]
    assert [r[0] for r in rows[1:]] == ["HD", "CD"]
    assert all(float(x) == 0.0 for r in rows[1:] for x in r[1:])
    assert "HD" in capsys.readouterr().out


def test_evaluate_missing_ground_truth(tmp_path, model16):
    (tmp_path / "pred").mkdir()
    (tmp_path / "gt").mkdir()
    save_obj(model16.template_mesh(), tmp_path / "pred" / "a.obj")
    with chdir(tmp_path):
        assert main(["evaluate", "--pred-dir", "pred", "--gt-dir", "gt"]) == 3
        assert main(["evaluate", "--pred-dir", "pred"]) == 2


@pytest.fixture(scope="module")
def smoke_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("smoke")
    t0 = time.perf_counter()
    codes = run_smoke(d)
    return d, codes, time.perf_counter() - t0


def test_smoke_run(smoke_dir):
    d, codes, seconds = smoke_dir
    assert codes == [0] * 9
    assert seconds < 120
    missing = [a for a in ARTIFACTS if not (d / a).exists()]
    assert not missing


def test_smoke_ablation_table(smoke_dir):
    d, _, _ = smoke_dir
    with open(d / "out" / "ablation.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["name", "HD", "CD", "data_amount"]
    assert [r[0] for r in rows[1:]] == ["full", "- L_p", "- L_a", "- L_f", "- L_g", "- augmentation"]
    assert rows[-1][3] == "32"
    assert all(np.isfinite(float(r[2])) for r in rows[1:])


def test_smoke_history_and_codes(smoke_dir):
    d, _, _ = smoke_dir
    lines = (d / "out" / "history.csv").read_text().splitlines()
    assert len(lines) == 51
    assert len(np.loadtxt(d / "pred" / "code_pred.txt")) == 16
    with open(d / "out" / "animation_p0000" / "face" / "distances.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 4
