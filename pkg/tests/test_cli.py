import json

import pytest

from cmil.bench import RunConfig, desk_config
from cmil.cli import (EXIT_CONFIG, EXIT_RUNTIME, ConfigError, aggregate, apply_overrides, dump_config,
                      format_report, load_config, main, parse_config_text, with_method)

TINY = "run.num_tasks = 2\nrun.bags_per_task = 10\ntrain.epochs = 2\n"


@pytest.fixture
def tiny_file(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY)
    return str(path)


@pytest.fixture
def dataset(tmp_path, tiny_file):
    out = tmp_path / "data"
    assert main(["generate", "--desk", "--config", tiny_file, "--seed", "0", "--out", str(out)]) == 0
    return out


class TestConfigFile:
    def test_parse(self):
        got = parse_config_text("# comment\ntrain.lr = 0.01\nsynth.regime = \"subtyping\"\n\nmodel.use_gdat = false")
        assert got == {"train": {"lr": 0.01}, "synth": {"regime": "subtyping"}, "model": {"use_gdat": False}}

    def test_int_promoted_to_float(self):
        assert parse_config_text("train.lr = 1")["train"]["lr"] == 1.0

    @pytest.mark.parametrize("text", ["train.nope = 1", "model.feature_dim = 8", "bogus.lr = 1", "train.lr"])
    def test_rejected_keys(self, text):
        with pytest.raises(ConfigError):
            parse_config_text(text)

    @pytest.mark.parametrize("text", ["train.epochs = 2.5", "train.use_bppl = 1", "train.lr = \"fast\""])
    def test_type_errors(self, text):
        with pytest.raises(ConfigError):
            parse_config_text(text)

    def test_dump_round_trip(self):
        config = with_method(desk_config(3), "full", ["lin"])
        back = apply_overrides(RunConfig(), parse_config_text(dump_config(config)))
        assert dump_config(back) == dump_config(config)

    def test_seed_sets_data_and_training(self, tiny_file):
        config = load_config(tiny_file, True, 7)
        assert config.data_seed == config.train.seed == 7 and config.num_tasks == 2

    def test_ablations(self):
        c = with_method(desk_config(), "full", ["projection", "gdat"])
        assert not c.train.projection_on and not c.model.use_gdat
        assert c.label == "full-no_projection-no_gdat"


class TestGenerate:
    def test_hash_is_reproducible(self, tmp_path, tiny_file, capsys):
        digests = []
        for name in ("a", "b"):
            main(["generate", "--desk", "--config", tiny_file, "--seed", "0", "--out", str(tmp_path / name)])
            digests.append(capsys.readouterr().out.split()[-1])
        assert digests[0] == digests[1] and len(digests[0]) == 40

    def test_refuses_nonempty_without_force(self, tiny_file, dataset, capsys):
        args = ["generate", "--desk", "--config", tiny_file, "--seed", "0", "--out", str(dataset)]
        assert main(args) == EXIT_CONFIG
        assert "--force" in capsys.readouterr().err
        assert main(args + ["--force"]) == 0

    def test_bad_config_exit_code(self, tmp_path):
        bad = tmp_path / "bad.cfg"
        bad.write_text("train.what = 3\n")
        assert main(["generate", "--config", str(bad), "--out", str(tmp_path / "x")]) == EXIT_CONFIG

    def test_missing_config_file(self, tmp_path):
        assert main(["generate", "--config", str(tmp_path / "none"), "--out", str(tmp_path / "x")]) == EXIT_CONFIG


class TestTrainAndReport:
    def test_train_two_seeds_then_report(self, tmp_path, tiny_file, dataset, capsys):
        runs = tmp_path / "runs"
        assert main(["train", "--desk", "--config", tiny_file, "--data", str(dataset),
                     "--seed", "0", "1", "--out", str(runs)]) == 0
        for s in (0, 1):
            manifest = json.loads((runs / f"seed{s}" / "manifest.json").read_text())
            assert manifest["seeds"] == {"train": s, "data": s}
            assert (runs / f"seed{s}" / "checkpoints" / "task2" / "manifest.json").is_file()
        capsys.readouterr()
        csv_path = tmp_path / "table.csv"
        assert main(["report", str(runs), "--csv", str(csv_path)]) == 0
        table = capsys.readouterr().out
        assert table.splitlines()[0].split()[:3] == ["method", "runs", "acc_inst"]
        assert table.splitlines()[1].split()[:2] == ["full", "2"]
        assert csv_path.read_text().startswith("label,runs,acc_inst_mean")

    def test_regen_and_resume(self, tmp_path, tiny_file):
        runs = tmp_path / "runs"
        assert main(["train", "--desk", "--config", tiny_file, "--regen", "--seed", "4", "--out", str(runs)]) == 0
        before = (runs / "seed4" / "metrics.csv").read_text()
        assert main(["train", "--desk", "--config", tiny_file, "--regen", "--seed", "4", "--out", str(runs),
                     "--resume", str(runs / "seed4" / "checkpoints" / "task1")]) == 0
        assert (runs / "seed4" / "metrics.csv").read_text() == before

    def test_missing_data(self, tmp_path, tiny_file):
        code = main(["train", "--desk", "--config", tiny_file, "--data", str(tmp_path / "none"),
                     "--out", str(tmp_path / "r")])
        assert code == EXIT_RUNTIME

    def test_data_flag_required(self, tmp_path):
        assert main(["train", "--out", str(tmp_path / "r")]) == EXIT_CONFIG

    def test_report_on_empty_dir(self, tmp_path):
        assert main(["report", str(tmp_path)]) == EXIT_RUNTIME

    def test_report_schema_mismatch(self, tmp_path):
        for name, keys in (("a", {"label": "x", "acc_inst": 0.5}), ("b", {"label": "x", "iou": 0.1})):
            (tmp_path / name).mkdir()
            (tmp_path / name / "summary.json").write_text(json.dumps(keys))
        assert main(["report", str(tmp_path)]) == EXIT_CONFIG

    def test_usage_error(self):
        with pytest.raises(SystemExit) as err:
            main(["report"])
        assert err.value.code == 2


class TestAggregate:
    def test_mean_and_std(self):
        rows = aggregate([{"label": "m", "acc_inst": 0.5, "forget_inst": None},
                          {"label": "m", "acc_inst": 0.7, "forget_inst": None}])
        assert rows[0]["runs"] == 2
        assert rows[0]["acc_inst"] == pytest.approx((0.6, 0.1))
        assert rows[0]["forget_inst"] is None
        _, text = format_report(rows)
        assert "60.00±10.00" in text and text.splitlines()[1].split()[3] == "-"
