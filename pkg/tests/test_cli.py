import csv
import hashlib

import numpy as np
import pytest

from ecloss import cli, experiment, nn, viz
from ecloss.errors import DomainError

SMALL = ["--n-identities", "3", "--samples-per-identity", "10", "--epochs", "1", "--batch-size", "8"]


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


class TestConfig:
    def test_defaults(self):
        c = experiment.RunConfig()
        assert (c.lr, c.batch_size, c.beta, c.tau, c.radius, c.template_count) == (0.03, 64, 1e-5, 0.001, 4.0, 400)

    def test_file_then_overrides(self, tmp_path):
        f = tmp_path / "run.cfg"
        f.write_text("# comment\nepochs = 3\nbeta = 0.5\n")
        args = cli.build_parser().parse_args(["train", "--config", str(f), "--beta", "0.25"])
        c = cli.resolve_config(args)
        assert c.epochs == 3 and c.beta == 0.25

    def test_unknown_key(self, tmp_path):
        f = tmp_path / "run.cfg"
        f.write_text("learning_rate = 0.1\n")
        with pytest.raises(DomainError, match="unknown"):
            experiment.load_config(f)

    def test_bad_value(self):
        with pytest.raises(DomainError):
            experiment.parse_config([("epochs", "1.5")])
        with pytest.raises(DomainError):
            experiment.parse_config([("ecloss", "maybe")])

    def test_dump_round_trip(self):
        c = experiment.parse_config([("beta", "3e-4"), ("out_dir", "x/y"), ("prominence_min", "0.2")])
        assert experiment.parse_config(experiment.read_pairs(c.dumps())) == c

    def test_spearman(self):
        assert experiment.spearman([1, 2, 3, 4], [10, 20, 30, 45]) == pytest.approx(1.0)
        assert experiment.spearman([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
        assert experiment.spearman([1, 2, 3], [5, 5, 5]) == 0.0


class TestGenData:
    def test_default_count(self, tmp_path, capsys):
        code, out, _ = run(capsys, "gen-data", "--out-dir", tmp_path)
        assert code == 0 and "samples: 2000" in out
        assert (tmp_path / "dataset.ecds").read_bytes().startswith(b"ECDS1 2000 56 56 4\n")

    def test_repeat_identical(self, tmp_path, capsys):
        run(capsys, "gen-data", *SMALL, "--out-dir", tmp_path / "a", "--pgm", 2)
        run(capsys, "gen-data", *SMALL, "--out-dir", tmp_path / "b", "--pgm", 2)
        for name in ("dataset.ecds", "sample_0.pgm", "sample_1.pgm"):
            assert digest(tmp_path / "a" / name) == digest(tmp_path / "b" / name)

    def test_jitter_too_large(self, tmp_path, capsys):
        code, _, err = run(capsys, "gen-data", "--jitter", "0.3", "--out-dir", tmp_path)
        assert code == 2 and "overlap" in err
        assert not (tmp_path / "config.txt").exists()

    def test_unknown_option(self, capsys):
        assert run(capsys, "gen-data", "--no-such-key", "1")[0] == 2


class TestGenTemplates:
    def test_default_size(self, tmp_path, capsys):
        code, out, _ = run(capsys, "gen-templates", "--out-dir", tmp_path)
        assert code == 0 and "templates: 400" in out and "prior=0.0025" in out
        assert (tmp_path / "templates.ect").read_bytes().startswith(b"ECT1 14 14 400 ")

    def test_too_many(self, tmp_path, capsys):
        assert run(capsys, "gen-templates", "--template-count", 19308, "--out-dir", tmp_path)[0] == 2

    def test_identical_bytes(self, tmp_path, capsys):
        run(capsys, "gen-templates", "--out-dir", tmp_path / "a")
        run(capsys, "gen-templates", "--out-dir", tmp_path / "b")
        assert digest(tmp_path / "a" / "templates.ect") == digest(tmp_path / "b" / "templates.ect")


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    assert cli.main(["train", *SMALL, "--out-dir", str(root / "on")]) == 0
    assert cli.main(["train", *SMALL, "--ecloss", "off", "--out-dir", str(root / "off")]) == 0
    assert cli.main(["train", *SMALL, "--beta", "0", "--out-dir", str(root / "beta0")]) == 0
    assert cli.main(["train", *SMALL, "--init", "zero", "--epochs", "0", "--out-dir", str(root / "zero")]) == 0
    return root


class TestTrain:
    def test_outputs(self, trained):
        log = list(csv.reader((trained / "on" / "train_log.csv").open()))
        assert log[0] == ["step", "cls_loss", "mi", "total_loss", "beta"]
        assert len(log) == 1 + 3  # 24 training samples, batch 8, 1 epoch
        assert float(log[1][4]) == 1e-5
        spec, params = nn.load_checkpoint(trained / "on" / "final.ecnn")
        assert spec.n_params == params.size
        cfg = experiment.load_config(trained / "on" / "config.txt")
        assert cfg.epochs == 1 and cfg.out_dir == str(trained / "on")

    def test_ablation_identity(self, trained):
        for name in ("final.ecnn", "train_log.csv"):
            assert (trained / "off" / name).read_bytes() == (trained / "beta0" / name).read_bytes()
        assert (trained / "off" / "train_log.csv").read_bytes() != (trained / "on" / "train_log.csv").read_bytes()

    def test_rerun_identical(self, trained, tmp_path, capsys):
        run(capsys, "train", *SMALL, "--out-dir", tmp_path)
        for name in ("final.ecnn", "train_log.csv"):
            assert digest(tmp_path / name) == digest(trained / "on" / name)

    def test_dataset_file_matches_regeneration(self, trained, tmp_path, capsys):
        run(capsys, "gen-data", *SMALL, "--out-dir", tmp_path)
        run(capsys, "train", *SMALL, "--dataset", tmp_path / "dataset.ecds", "--out-dir", tmp_path / "t")
        assert digest(tmp_path / "t" / "final.ecnn") == digest(trained / "on" / "final.ecnn")

    def test_templates_file(self, trained, tmp_path, capsys):
        run(capsys, "gen-templates", "--out-dir", tmp_path)
        run(capsys, "train", *SMALL, "--templates", tmp_path / "templates.ect", "--out-dir", tmp_path / "t")
        assert digest(tmp_path / "t" / "train_log.csv") == digest(trained / "on" / "train_log.csv")

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_exit_code(self, tmp_path, capsys):
        code, _, err = run(capsys, "train", *SMALL, "--lr", "1e200", "--epochs", "2", "--out-dir", tmp_path)
        assert code == 3 and "step" in err


class TestEval:
    def test_zero_network(self, trained, tmp_path, capsys):
        code, out, _ = run(capsys, "eval", *SMALL, "--checkpoint", trained / "zero" / "final.ecnn",
                           "--out-dir", tmp_path)
        assert code == 0
        rows = {(m, s): v for m, s, v in list(csv.reader((tmp_path / "metrics.csv").open()))[1:]}
        assert float(rows["pe_mean", "model"]) == 0.0
        assert int(rows["n_degenerate_maps", "model"]) == 6 * 16

    def test_repeat_identical(self, trained, tmp_path, capsys):
        ck = trained / "on" / "final.ecnn"
        run(capsys, "eval", *SMALL, "--checkpoint", ck, "--metrics", tmp_path / "a.csv", "--out-dir", tmp_path)
        run(capsys, "eval", *SMALL, "--checkpoint", ck, "--metrics", tmp_path / "b.csv", "--out-dir", tmp_path)
        assert digest(tmp_path / "a.csv") == digest(tmp_path / "b.csv")

    def test_paired_deltas(self, trained, tmp_path, capsys):
        code, out, _ = run(capsys, "eval", *SMALL, "--checkpoint", trained / "on" / "final.ecnn",
                           "--baseline", trained / "off" / "final.ecnn", "--out-dir", tmp_path)
        assert code == 0 and "baseline" in out and "ecloss" in out
        rows = list(csv.reader((tmp_path / "metrics.csv").open()))
        assert rows[0] == ["metric", "scope", "value"]
        vals = {(m, s): float(v) for m, s, v in rows[1:] if s in ("ecloss", "baseline", "delta")}
        for name in ("pe_mean", "ls", "peak_mean"):
            assert vals[name, "delta"] == vals[name, "ecloss"] - vals[name, "baseline"]

    def test_literal_ls_switch(self, trained, tmp_path, capsys):
        run(capsys, "eval", *SMALL, "--checkpoint", trained / "on" / "final.ecnn", "--ls-formula", "literal",
            "--out-dir", tmp_path)
        rows = {(m, s): v for m, s, v in list(csv.reader((tmp_path / "metrics.csv").open()))[1:]}
        assert float(rows["ls", "model"]) == pytest.approx(0.0, abs=1e-6)

    def test_missing_checkpoint(self, tmp_path, capsys):
        assert run(capsys, "eval", *SMALL, "--checkpoint", tmp_path / "nope.ecnn", "--out-dir", tmp_path)[0] == 3

    def test_wrong_network(self, trained, tmp_path, capsys):
        code = run(capsys, "eval", *SMALL, "--channels", 8, "--checkpoint", trained / "on" / "final.ecnn",
                   "--out-dir", tmp_path)[0]
        assert code == 2


class TestVisualize:
    def test_one_file(self, trained, tmp_path, capsys):
        code, _, _ = run(capsys, "visualize", *SMALL, "--checkpoint", trained / "on" / "final.ecnn",
                         "--sample-index", 3, "--channel-index", 5, "--out-dir", tmp_path)
        assert code == 0
        assert sorted(p.name for p in tmp_path.glob("*.ppm")) == ["s3_c5.ppm"]
        assert (tmp_path / "s3_c5.ppm").read_bytes().startswith(b"P6 56 56 255\n")

    def test_out_of_range(self, trained, tmp_path, capsys):
        for flag, value in (("--channel-index", 16), ("--sample-index", 30), ("--sample-index", "a")):
            code = run(capsys, "visualize", *SMALL, "--checkpoint", trained / "on" / "final.ecnn",
                       flag, value, "--out-dir", tmp_path)[0]
            assert code == 2

    def test_dead_channel_shows_image(self, trained, tmp_path, capsys):
        run(capsys, "visualize", *SMALL, "--checkpoint", trained / "zero" / "final.ecnn",
            "--sample-index", 0, "--channel-index", 0, "--out-dir", tmp_path)
        run(capsys, "gen-data", *SMALL, "--out-dir", tmp_path / "d", "--pgm", 1)
        rgb = viz.read_image(tmp_path / "s0_c0.ppm")
        grey = viz.read_image(tmp_path / "d" / "sample_0.pgm")
        for c in range(3):
            np.testing.assert_array_equal(rgb[..., c], grey)
