import csv
import os

import numpy as np
import pytest

from gaitcaps import cli, data, training
from gaitcaps.config import TrainConfig
from conftest import TINY


@pytest.fixture(scope="module")
def tiny_config_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.cfg"
    path.write_text(TrainConfig(**TINY).to_text())
    return path


@pytest.fixture(scope="module")
def trained(synth_root, tiny_config_file, tmp_path_factory):
    out = tmp_path_factory.mktemp("train") / "m.gcap"
    code = cli.main(["train", "--data", str(synth_root), "--config", str(tiny_config_file),
                     "--out-checkpoint", str(out), "--train-ids", "4"])
    assert code == 0
    return out


class TestSynth:
    def test_counts_match_disk(self, tmp_path, capsys):
        out = tmp_path / "d"
        code = cli.main(["synth", "--out", str(out), "--identities", "4", "--views", "0,90",
                         "--conditions", "nm:2,bg:1", "--frames", "3"])
        assert code == 0
        line = capsys.readouterr().out.strip()
        assert line == f"synth: identities=4 sequences=24 frames=72 out={out}"
        seq_dirs = {p.parent for p in out.rglob("*.png")}
        assert len(seq_dirs) == 4 * 2 * 3
        assert len(data.load_dataset(out)) == 24

    def test_deterministic(self, tmp_path, capsys):
        outs = []
        for name in ("a", "b"):
            cli.main(["synth", "--out", str(tmp_path / name), "--identities", "2",
                      "--views", "0,90", "--conditions", "nm:2", "--frames", "2", "--seed", "5"])
            outs.append(capsys.readouterr().out.split(" out=")[0])
        assert outs[0] == outs[1]
        files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.png"))
        files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*.png"))
        assert files_a == files_b
        assert all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files_a)

    def test_empty_views_is_usage_error(self, tmp_path, capsys):
        assert cli.main(["synth", "--out", str(tmp_path), "--identities", "2", "--views", ""]) == 2
        assert "usage:" in capsys.readouterr().err

    @pytest.mark.parametrize("flags", [["--conditions", "xx:2"], ["--conditions", "nm:0"],
                                       ["--views", "a,b"], ["--bogus"]])
    def test_bad_flags(self, tmp_path, flags):
        assert cli.main(["synth", "--out", str(tmp_path), "--identities", "2"] + flags) == 2

    def test_single_view_runtime_error(self, tmp_path, capsys):
        assert cli.main(["synth", "--out", str(tmp_path), "--identities", "2", "--views", "0"]) == 1
        assert "2 views" in capsys.readouterr().err


class TestTrain:
    def test_checkpoint_and_loss_log(self, trained):
        ckpt = training.load_checkpoint(trained)
        assert len(ckpt.classes) == 4 and ckpt.config.conv_spec == TINY["conv_spec"]
        lines = (trained.parent / "m.gcap.loss.txt").read_text().splitlines()
        assert len(lines) == TINY["pretrain_steps"] + TINY["train_steps"]
        assert [l.split()[:2] for l in lines] == [["pretrain", "0"], ["pretrain", "1"], ["pretrain", "2"],
                                                  ["train", "0"], ["train", "1"], ["train", "2"]]
        assert all(np.isfinite(float(l.split()[2])) for l in lines)

    def test_seed_flag_deterministic(self, synth_root, tiny_config_file, tmp_path):
        paths = []
        for name in ("a", "b"):
            p = tmp_path / f"{name}.gcap"
            assert cli.main(["train", "--data", str(synth_root), "--config", str(tiny_config_file),
                             "--out-checkpoint", str(p), "--seed", "9", "--train-ids", "3"]) == 0
            paths.append(p)
        assert paths[0].read_bytes() == paths[1].read_bytes()
        assert training.load_checkpoint(paths[0]).config.seed == 9

    def test_freeze_flag(self, synth_root, tiny_config_file, tmp_path):
        p = tmp_path / "f.gcap"
        assert cli.main(["train", "--data", str(synth_root), "--config", str(tiny_config_file),
                         "--out-checkpoint", str(p), "--freeze-pfe", "--train-ids", "2"]) == 0
        assert training.load_checkpoint(p).config.freeze_pfe

    def test_missing_data_dir(self, tmp_path, capsys):
        missing = tmp_path / "nowhere"
        assert cli.main(["train", "--data", str(missing), "--out-checkpoint", str(tmp_path / "x")]) == 1
        assert str(missing) in capsys.readouterr().err

    def test_bad_train_ids(self, synth_root, tmp_path):
        assert cli.main(["train", "--data", str(synth_root), "--out-checkpoint", str(tmp_path / "x"),
                         "--train-ids", "1"]) == 2

    def test_bad_config_file(self, synth_root, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("lr=-1\n")
        assert cli.main(["train", "--data", str(synth_root), "--config", str(cfg),
                         "--out-checkpoint", str(tmp_path / "x")]) == 1
        assert "lr" in capsys.readouterr().err


class TestEval:
    def test_report(self, trained, synth_root, tmp_path, capsys):
        out = tmp_path / "r.csv"
        assert cli.main(["eval", "--data", str(synth_root), "--checkpoint", str(trained),
                         "--protocol", "synthetic", "--report-out", str(out)]) == 0
        summary = capsys.readouterr().out
        assert summary.startswith("protocol=synthetic") and "overall.mean=" in summary
        text = out.read_text()
        assert text.count("# condition=") == 3
        rows = [l for l in text.splitlines() if l.startswith("0,")]
        assert all(l.split(",")[1] == "-" for l in rows)  # view 0 vs gallery view 0 excluded

    def test_held_out_by_default(self, trained, synth_root, tmp_path):
        ckpt = training.load_checkpoint(trained)
        out = tmp_path / "e.csv"
        assert cli.main(["embed", "--data", str(synth_root), "--checkpoint", str(trained),
                         "--protocol", "synthetic", "--out-csv", str(out)]) == 0
        ids = {r["id"] for r in csv.DictReader(out.open())}
        assert ids and not ids & set(ckpt.classes)

    def test_bogus_protocol(self, trained, synth_root, tmp_path):
        assert cli.main(["eval", "--data", str(synth_root), "--checkpoint", str(trained),
                         "--protocol", "bogus", "--report-out", str(tmp_path / "r")]) == 2

    def test_config_mismatch(self, trained, synth_root, tmp_path, capsys):
        cfg = tmp_path / "wide.cfg"
        cfg.write_text(TrainConfig(**dict(TINY, hidden=12)).to_text())
        assert cli.main(["eval", "--data", str(synth_root), "--checkpoint", str(trained),
                         "--config", str(cfg), "--protocol", "synthetic",
                         "--report-out", str(tmp_path / "r")]) == 1
        err = capsys.readouterr().err
        assert "mismatch" in err and "rnn.fwd.Uz: checkpoint (8, 8) vs config (12, 12)" in err

    def test_matching_config_accepted(self, trained, synth_root, tiny_config_file, tmp_path):
        assert cli.main(["eval", "--data", str(synth_root), "--checkpoint", str(trained),
                         "--config", str(tiny_config_file), "--protocol", "synthetic",
                         "--report-out", str(tmp_path / "r")]) == 0

    def test_missing_protocol_sequences(self, trained, synth_root, tmp_path, capsys):
        # the synthetic fixture has no NM-05/06, so the casia-b protocol cannot be built
        assert cli.main(["eval", "--data", str(synth_root), "--checkpoint", str(trained),
                         "--report-out", str(tmp_path / "r")]) == 1
        assert "nm-05" in capsys.readouterr().err

    def test_corrupt_checkpoint(self, synth_root, tmp_path, capsys):
        bad = tmp_path / "bad.gcap"
        bad.write_bytes(b"nope")
        assert cli.main(["eval", "--data", str(synth_root), "--checkpoint", str(bad),
                         "--report-out", str(tmp_path / "r")]) == 1
        assert "not a checkpoint" in capsys.readouterr().err


class TestEmbed:
    def test_csv_and_summary(self, trained, synth_root, tmp_path, capsys):
        out = tmp_path / "e.csv"
        assert cli.main(["embed", "--data", str(synth_root), "--checkpoint", str(trained),
                         "--protocol", "synthetic", "--out-csv", str(out), "--all-ids"]) == 0
        rows = list(csv.reader(out.open()))
        assert capsys.readouterr().out.strip() == f"embed: rows={len(rows) - 1} out={out}"
        assert rows[0] == ["id", "view", "condition"] + [f"e{i}" for i in range(16)]
        assert len(rows) - 1 == 8 * 2 * 6

    def test_unwritable_path(self, trained, synth_root, tmp_path):
        out = tmp_path / "no" / "such" / "dir" / "e.csv"
        assert cli.main(["embed", "--data", str(synth_root), "--checkpoint", str(trained),
                         "--protocol", "synthetic", "--out-csv", str(out)]) == 1


class TestGradcheck:
    def test_pass(self, capsys):
        assert cli.main(["gradcheck", "--blocks", "conv2d,linear,routing_3iter"]) == 0
        out = capsys.readouterr().out.splitlines()
        assert [l.split()[0] for l in out[:3]] == ["conv2d", "linear", "routing_3iter"]
        assert all(l.endswith(" ok") for l in out[:3])

    def test_threshold_exceeded_names_block(self, capsys):
        assert cli.main(["gradcheck", "--blocks", "squash", "--threshold", "1e-30"]) == 1
        captured = capsys.readouterr()
        assert "FAIL" in captured.out and "squash" in captured.err

    def test_deterministic(self, capsys):
        cli.main(["gradcheck", "--blocks", "gru_cell,triplet_ba", "--seed", "3"])
        a = capsys.readouterr().out.splitlines()[:2]
        cli.main(["gradcheck", "--blocks", "gru_cell,triplet_ba", "--seed", "3"])
        assert capsys.readouterr().out.splitlines()[:2] == a

    def test_unknown_block(self):
        assert cli.main(["gradcheck", "--blocks", "attention"]) == 2


class TestAblate:
    def test_report(self, synth_root, tiny_config_file, tmp_path, capsys):
        out = tmp_path / "abl.csv"
        assert cli.main(["ablate", "--data", str(synth_root), "--config", str(tiny_config_file),
                         "--report-out", str(out), "--train-ids", "4"]) == 0
        lines = out.read_text().splitlines()
        assert "# complete=true" in lines
        body = lines[5:]
        assert [l.split(",")[0] for l in body] == ["full", "uni_gru", "no_rnn", "no_caps", "conv_caps"]
        for l in body:
            assert os.path.exists(l.split(",")[-1])

    def test_incomplete_exit_1(self, synth_root, tmp_path, capsys):
        cfg = tmp_path / "odd.cfg"
        cfg.write_text(TrainConfig(**dict(TINY, hidden=3, pretrain_steps=1, train_steps=1)).to_text())
        out = tmp_path / "abl.csv"
        assert cli.main(["ablate", "--data", str(synth_root), "--config", str(cfg),
                         "--report-out", str(out), "--train-ids", "4"]) == 1
        assert "# complete=false" in out.read_text()
        assert "conv_caps" in capsys.readouterr().err

    def test_needs_held_out(self, synth_root, tmp_path):
        assert cli.main(["ablate", "--data", str(synth_root), "--report-out", str(tmp_path / "a"),
                         "--train-ids", "8"]) == 2


class TestMisc:
    def test_no_command(self):
        assert cli.main([]) == 2

    def test_help(self, capsys):
        assert cli.main(["--help"]) == 0
        assert "synth" in capsys.readouterr().out
