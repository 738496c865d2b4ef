import json

import pytest

from jointshape import cli
from jointshape.config import ConfigError, ExperimentConfig, load_config, parse_text, resolve

FIXTURE_CSV = """case_id,fold,seed,label,score
c0,0,0,1,0.9
c1,0,0,1,0.6
c2,0,0,1,0.4
c3,0,0,0,0.7
c4,0,0,0,0.3
c5,0,0,0,0.1
"""


class TestConfig:
    def test_desk_defaults(self):
        cfg = resolve()
        assert (cfg.size, cfg.shape_dim, cfg.folds, cfg.seeds) == (32, 64, 4, (0, 1, 2, 3, 4))

    def test_paper_preset(self):
        cfg = resolve("paper")
        assert cfg.size == 128
        ae, joint = cfg.pretrain_config(), cfg.train_config("joint")
        assert (ae.iterations, ae.base_lr) == (40000, 1e-6)
        assert ae.lr_decay_points == ()
        assert (joint.iterations, joint.base_lr) == (40000, 5e-4)
        assert joint.lr_decay_points == (20000, 30000)
        assert joint.decay_factor == 0.1 and joint.freeze_until == 5000

    def test_flag_overrides_file(self, tmp_path):
        path = tmp_path / "exp.cfg"
        path.write_text("# experiment\nshape_dim = 64  # file value\nfolds = 3\n")
        cfg = load_config(path, overrides={"shape_dim": "128"})
        assert cfg.shape_dim == 128 and cfg.folds == 3

    def test_file_overrides_preset(self):
        assert resolve("paper", {"freeze_until": 100}).freeze_until == 100

    def test_round_trip(self):
        cfg = resolve("paper", overrides={"seeds": "3, 5", "augmentation": "false"})
        assert resolve(file_values=parse_text(cfg.to_text())) == cfg

    @pytest.mark.parametrize("text, match", [
        ("bogus = 1", "bogus"),
        ("shape_dim = many", "shape_dim"),
        ("shape_dim = 100", "shape_dim"),
        ("freeze_until = 5000", "freeze_until"),
        ("no equals sign", "line 1"),
        ("augmentation = maybe", "augmentation"),
    ])
    def test_rejections_name_the_key(self, text, match):
        with pytest.raises(ConfigError, match=match):
            resolve(file_values=parse_text(text))

    def test_every_field_has_default(self):
        assert ExperimentConfig() == resolve("desk")


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A tiny end-to-end run: gen, gen (auto-encoder set), pretrain."""
    root = tmp_path_factory.mktemp("ws")
    cfg = root / "small.cfg"
    cfg.write_text(
        "grid_size = 32\neffect_size = 1.0\ncount_normal = 12\ncount_abnormal = 8\nae_count = 4\n"
        "size = 8\nshape_dim = 16\nae_iterations = 6\niterations = 8\nfreeze_until = 2\n"
        "lr_decay_points = 4, 6\nseeds = 0, 1\nlog_every = 2\nsvm_iterations = 50\n"
        f"data_dir = {root / 'data'}\nae_data_dir = {root / 'ae'}\n"
        f"checkpoint_dir = {root / 'ckpt'}\nreport_dir = {root / 'rep'}\n")
    base = ["--config", str(cfg)]
    assert cli.main(["gen", *base]) == 0
    assert cli.main(["gen", *base, "--ae"]) == 0
    assert cli.main(["pretrain", *base]) == 0
    return root, base


class TestCommands:
    def test_gen_writes_manifest_and_config(self, workspace):
        root, _ = workspace
        assert (root / "data" / "manifest.csv").exists()
        assert "count_normal = 12" in (root / "data" / "config.txt").read_text()
        ae = (root / "ae" / "manifest.csv").read_text().splitlines()
        assert len(ae) == 1 + 4 and all(",0," in line for line in ae[1:])

    def test_pretrain_outputs(self, workspace):
        root, _ = workspace
        assert (root / "ckpt" / "ae.sckp").exists()
        log = (root / "ckpt" / "ae.log").read_text().splitlines()
        assert log[0] == "iter,lr,loss_total,loss_recon,loss_clf"
        report = json.loads((root / "ckpt" / "ae.json").read_text())
        assert report["cases"] == 4 and 0.0 <= report["min_dsc"] <= report["mean_dsc"] <= 1.0

    @pytest.mark.parametrize("pipeline", ["joint", "svm"])
    def test_train_then_eval(self, workspace, pipeline, capsys):
        root, base = workspace
        ckpt = root / "ckpt" / f"{pipeline}_f1.sckp"
        assert cli.main(["train", *base, "--pipeline", pipeline, "--fold-exclude", "1",
                         "--out", str(ckpt)]) == 0
        assert cli.main(["eval", *base, "--checkpoint", str(ckpt)]) == 0
        report = json.loads((root / "rep" / f"eval_{pipeline}_f1.json").read_text())
        assert report["fold"] == 1 and report["cases"] == 5
        assert "auc =" in capsys.readouterr().out

    def test_cv_is_byte_identical(self, workspace, tmp_path):
        root, base = workspace
        outs = []
        for k in range(2):
            out = tmp_path / f"run{k}"
            assert cli.main(["cv", *base, "--pipeline", "joint", "--out", str(out)]) == 0
            outs.append(out)
        for name in ("cv_joint.json", "predictions_joint.csv", "predictions_joint_dsc_low.csv",
                     "config.txt"):
            assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
        doc = json.loads((outs[0] / "cv_joint.json").read_text())
        assert set(doc["reports"]) == {"clean", "dsc_high", "dsc_low", "abnormal_low"}
        assert doc["reports"]["clean"]["seeds"] == [0, 1]

    def test_resolved_config_reproduces(self, workspace, tmp_path):
        root, base = workspace
        a, b = tmp_path / "a", tmp_path / "b"
        assert cli.main(["cv", *base, "--pipeline", "svm", "--out", str(a)]) == 0
        assert cli.main(["cv", "--config", str(a / "config.txt"), "--pipeline", "svm", "--out", str(b)]) == 0
        assert (a / "cv_svm.json").read_bytes() == (b / "cv_svm.json").read_bytes()

    def test_roc_fixture(self, tmp_path, capsys):
        path = tmp_path / "p.csv"
        path.write_text(FIXTURE_CSV)
        assert cli.main(["roc", "--predictions", str(path)]) == 0
        out = capsys.readouterr().out
        assert out.splitlines()[0] == "threshold,tpr,fpr"
        assert float(out.split("auc = ")[1]) == pytest.approx(7 / 9, abs=1e-15)

    def test_missing_checkpoint_hint(self, workspace, tmp_path, capsys):
        _, base = workspace
        code = cli.main(["cv", *base, "--pipeline", "joint", "--ae-checkpoint", str(tmp_path / "none.sckp")])
        assert code == cli.EXIT_MISSING
        assert "jointshape pretrain" in capsys.readouterr().err

    def test_missing_dataset_hint(self, tmp_path, capsys):
        code = cli.main(["train", "--pipeline", "frozen", "--data", str(tmp_path / "nowhere")])
        assert code == cli.EXIT_MISSING
        assert "jointshape gen" in capsys.readouterr().err

    def test_bad_value_exits_nonzero(self, capsys):
        assert cli.main(["gen", "--shape-dim", "100"]) == cli.EXIT_USAGE
        assert "shape_dim" in capsys.readouterr().err

    def test_mismatched_checkpoint_rejected(self, workspace, capsys):
        root, base = workspace
        code = cli.main(["cv", *base, "--size", "16", "--pipeline", "frozen"])
        assert code == cli.EXIT_FAILURE
        assert "V=8" in capsys.readouterr().err
