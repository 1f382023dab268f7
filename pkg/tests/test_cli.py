import csv
import io
import json

import pytest

from fedkl import cli

SMALL = {"model": {"channels": 2}, "key": {"key_len": 32},
         "dataset": {"n_per_class": 8}, "fl": {"clients": 2, "rounds": 2}}


def write_cfg(tmp_path, extra=None, name="cfg.json"):
    cfg = json.loads(json.dumps(SMALL))
    for k, v in (extra or {}).items():
        if isinstance(v, dict):
            cfg.setdefault(k, {}).update(v)
        else:
            cfg[k] = v
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    d = tmp_path_factory.mktemp("train")
    cfg = write_cfg(d)
    assert cli.main(["train", "--config", cfg, "--out", str(d / "run")]) == 0
    return d, cfg


class TestConfig:
    def test_defaults_are_materialized(self, tmp_path):
        cfg = cli.load_config(None)
        assert cfg["schema_version"] == cli.SCHEMA_VERSION and isinstance(cfg["seed"], int)
        assert cfg["attack"]["seed"] == 0

    def test_flags_override_file(self, tmp_path):
        cfg = cli.load_config(write_cfg(tmp_path, {"seed": 3}), seed=8, out="x")
        assert cfg["seed"] == 8 and cfg["out"] == "x"

    @pytest.mark.parametrize("bad", [{"mode": "fedsgd"}, {"fl": {"lr": -1}}, {"bogus": 1},
                                     {"schema_version": 99}, {"mode": "fedavg"},
                                     {"norm": "plain", "attack": {"scenario": "both"}}])
    def test_invalid_fields_are_named(self, tmp_path, bad):
        with pytest.raises(cli.ConfigError, match="'"):
            cli.load_config(write_cfg(tmp_path, bad))

    def test_invalid_config_exit_code(self, tmp_path):
        assert cli.main(["train", "--config", write_cfg(tmp_path, {"fl": {"rounds": 0}})]) == cli.EXIT_CONFIG

    def test_missing_config_exit_code(self, tmp_path):
        assert cli.main(["train", "--config", str(tmp_path / "nope.json")]) == cli.EXIT_IO


class TestTrain:
    def test_outputs(self, trained):
        d, _ = trained
        run = d / "run"
        for name in ("config.json", "metrics.csv", "rounds.jsonl", "global.ckpt", "client_0.ckpt", "client_0.key"):
            assert (run / name).is_file()
        rows = list(csv.reader(io.StringIO((run / "metrics.csv").read_text())))
        assert rows[0] == ["round", "client", "own_acc", "random_acc"] and len(rows) == 1 + 2 * 2
        assert len((run / "rounds.jsonl").read_text().splitlines()) == 2

    def test_rerun_is_byte_identical(self, trained, tmp_path):
        d, cfg = trained
        assert cli.main(["train", "--config", cfg, "--out", str(tmp_path / "again")]) == 0
        for name in ("metrics.csv", "rounds.jsonl", "client_1.ckpt"):
            assert (tmp_path / "again" / name).read_bytes() == (d / "run" / name).read_bytes()

    def test_zero_epochs_is_chance(self, tmp_path):
        cfg = write_cfg(tmp_path, {"fl": {"clients": 1, "rounds": 1, "epochs": 0}, "dataset": {"n_per_class": 100}})
        assert cli.main(["train", "--config", cfg, "--out", str(tmp_path / "r")]) == 0
        row = list(csv.DictReader(open(tmp_path / "r" / "metrics.csv")))[0]
        assert abs(float(row["own_acc"]) - 0.25) <= 0.15

    def test_fedkl_equals_fedavg_without_keylock(self, tmp_path):
        outs = []
        for mode in ("fedkl", "fedavg"):
            cfg = write_cfg(tmp_path, {"mode": mode, "norm": "plain"}, name=f"{mode}.json")
            assert cli.main(["train", "--config", cfg, "--out", str(tmp_path / mode)]) == 0
            outs.append(tmp_path / mode)
        for name in ("metrics.csv", "rounds.jsonl", "global.ckpt", "client_0.ckpt"):
            assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


class TestAttackEvalReport:
    def test_attack_both_reconstructs(self, trained, tmp_path):
        d, cfg = trained
        out = tmp_path / "atk"
        code = cli.main(["attack", "--config", cfg, "--checkpoint", str(d / "run" / "client_0.ckpt"),
                         "--scenario", "both", "--out", str(out)])
        assert code == 0
        res = json.loads((out / "attack.json").read_text())
        assert res["with_kl"] and res["scenario"] == "both"
        psnr = res["metrics"]["psnr_db"]
        assert psnr == "identical" or psnr >= 30.0
        assert (out / "true.ppm").is_file() and (out / "reconstructed.ppm").is_file()

    def test_attack_none_still_reports(self, trained, tmp_path):
        d, cfg = trained
        out = tmp_path / "atk"
        cfg2 = write_cfg(tmp_path, {"attack": {"max_iters": 20}})
        assert cli.main(["attack", "--config", cfg2, "--checkpoint", str(d / "run" / "client_0.ckpt"),
                         "--out", str(out)]) == 0
        assert "psnr_db" in json.loads((out / "attack.json").read_text())["metrics"]

    def test_missing_checkpoint(self, trained, tmp_path):
        _, cfg = trained
        assert cli.main(["attack", "--config", cfg, "--checkpoint", str(tmp_path / "x.ckpt")]) == cli.EXIT_IO

    def test_architecture_mismatch(self, trained, tmp_path):
        d, _ = trained
        cfg = write_cfg(tmp_path, {"model": {"channels": 3}})
        code = cli.main(["attack", "--config", cfg, "--checkpoint", str(d / "run" / "client_0.ckpt"),
                         "--out", str(tmp_path / "o")])
        assert code == cli.EXIT_CONFIG

    def test_missing_key_file(self, trained, tmp_path):
        d, cfg = trained
        ckpt = tmp_path / "client_0.ckpt"
        ckpt.write_bytes((d / "run" / "client_0.ckpt").read_bytes())
        assert cli.main(["attack", "--config", cfg, "--checkpoint", str(ckpt), "--out", str(tmp_path / "o")]) \
            == cli.EXIT_CONFIG

    @pytest.mark.parametrize("source", ["own", "random", "other:1"])
    def test_eval(self, trained, tmp_path, source, capsys):
        d, cfg = trained
        code = cli.main(["eval", "--config", cfg, "--checkpoint", str(d / "run" / "client_0.ckpt"),
                         "--key-source", source, "--out", str(tmp_path)])
        assert code == 0
        acc = json.loads(capsys.readouterr().out)["accuracy"]
        assert 0.0 <= acc <= 1.0

    def test_report_ratios_and_skips(self, tmp_path):
        base = {"method": "DLG", "model": "tinycnn", "dataset": "blobs", "scenario": "none"}
        rows = [dict(base, with_kl=False, metrics={"mse": 2.0, "psnr_db": 40.0, "ssim": 0.9}),
                dict(base, with_kl=True, metrics={"mse": 6.0, "psnr_db": 10.0, "ssim": 0.3})]
        for i, r in enumerate(rows):
            (tmp_path / f"r{i}").mkdir()
            (tmp_path / f"r{i}" / "attack.json").write_text(json.dumps(r))
        (tmp_path / "broken.json").write_text("{not json")
        text, skipped = cli.run_report(tmp_path, tmp_path / "table.csv")
        table = list(csv.DictReader(io.StringIO(text)))
        assert skipped == 1 and len(table) == 2
        kl = [r for r in table if r["with_kl"] == "True"][0]
        assert float(kl["mse_ratio"]) == 3.0 and float(kl["psnr_ratio"]) == 0.25
        assert float(kl["ssim_ratio"]) == pytest.approx(1 / 3, rel=1e-15)

    def test_report_empty_dir(self, tmp_path):
        assert cli.main(["report", str(tmp_path)]) == cli.EXIT_IO
