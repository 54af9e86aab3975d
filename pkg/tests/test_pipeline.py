import csv
import json
from dataclasses import replace

import numpy as np
import pytest

from conftest import tiny_run
from sepnorm import checkpoint as ckpt
from sepnorm.ablation import GridSpec, run_grid
from sepnorm.analysis import measure_uniformity
from sepnorm.cli import main, read_config_file, run_config_from
from sepnorm.data import load_dataset
from sepnorm.encoder import EncoderConfig
from sepnorm.train import (LOG_COLUMNS, REPORT_COLUMNS, RunConfig, TrainingDiverged, analyze, build_models,
                           pretrain, read_matrix, run_cell, write_matrix)


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


class TestCheckpoint:
    def test_roundtrip_is_byte_identical(self, tmp_path, tiny_data):
        cfg = tiny_run(steps=2)
        pretrain(cfg, load_dataset(tiny_data)["train"], tmp_path)
        raw = (tmp_path / "checkpoint.bin").read_bytes()
        ck = ckpt.decode_checkpoint(raw)
        assert ckpt.encode_checkpoint(ck) == raw
        enc, dec = ckpt.restore(ck)
        ckpt.save(tmp_path / "again.bin", enc, dec, cfg.objective, ck.step, ck.rng_state)
        assert (tmp_path / "again.bin").read_bytes() == raw

    def test_restored_forward_is_bit_exact(self, tmp_path, tiny_data):
        cfg = tiny_run("share:bn", steps=2)
        splits = load_dataset(tiny_data)
        res = pretrain(cfg, splits["train"], tmp_path)
        enc, _ = ckpt.restore(ckpt.read(tmp_path / "checkpoint.bin"))
        x = splits["test"].floats()
        a, b = res.encoder.encode_numpy(x), enc.encode_numpy(x)
        assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()

    def test_contains_bn_buffers(self, tmp_path, tiny_data):
        pretrain(tiny_run("sep:bn+bn", steps=1), load_dataset(tiny_data)["train"], tmp_path)
        names = ckpt.read(tmp_path / "checkpoint.bin").tensors
        assert "final_norm.g1.running_mean" in names and "final_norm.g2.running_var" in names

    def test_mismatched_config_rejected(self, tmp_path, tiny_data):
        cfg = tiny_run(steps=0)
        pretrain(cfg, load_dataset(tiny_data)["train"], tmp_path)
        ck = ckpt.read(tmp_path / "checkpoint.bin")
        with pytest.raises(ckpt.CheckpointError):
            ckpt.restore(ck, expect=replace(cfg.encoder, dim=16, heads=2))
        with pytest.raises(ckpt.CheckpointError):
            ckpt.restore(ck, expect=replace(cfg.encoder, norm_scheme="share:ln"))
        enc16, dec16 = build_models(replace(cfg, encoder=replace(cfg.encoder, dim=16)))
        with pytest.raises(ckpt.CheckpointError):
            ckpt.load_into(ck.tensors, enc16, dec16)

    def test_rejects_foreign_bytes(self):
        with pytest.raises(ckpt.CheckpointError):
            ckpt.decode_checkpoint(b"SEPNORM2" + bytes(8))


class TestPretrain:
    def test_zero_steps(self, tmp_path, tiny_data):
        cfg = tiny_run(steps=0)
        pretrain(cfg, load_dataset(tiny_data)["train"], tmp_path)
        assert (tmp_path / "train_log.csv").read_text() == ",".join(LOG_COLUMNS) + "\n"
        enc, dec = build_models(cfg)
        fresh = ckpt.model_tensors(enc, dec)
        saved = ckpt.read(tmp_path / "checkpoint.bin").tensors
        assert list(saved) == list(fresh)
        for k in fresh:
            assert saved[k].tobytes() == np.asarray(fresh[k]).tobytes()

    def test_log_rows(self, tmp_path, tiny_data):
        pretrain(tiny_run(steps=4, lam=0.1, target="cls"), load_dataset(tiny_data)["train"], tmp_path)
        rows = read_csv(tmp_path / "train_log.csv")
        assert [int(r["step"]) for r in rows] == [1, 2, 3, 4]
        for r in rows:
            assert float(r["total"]) == pytest.approx(float(r["l_mae"]) + 0.1 * float(r["l_u"]), rel=1e-12)

    def test_deterministic(self, tmp_path, tiny_data):
        train = load_dataset(tiny_data)["train"]
        for sub in ("a", "b"):
            pretrain(tiny_run(steps=3), train, tmp_path / sub)
        for f in ("checkpoint.bin", "train_log.csv"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_divergence_keeps_last_good_checkpoint(self, tmp_path, tiny_data):
        cfg = tiny_run(steps=50)
        cfg = replace(cfg, optim=replace(cfg.optim, lr=1e6))
        with pytest.raises(TrainingDiverged) as err:
            pretrain(cfg, load_dataset(tiny_data)["train"], tmp_path)
        ck = ckpt.read(tmp_path / "checkpoint.bin")
        assert all(np.isfinite(v).all() for v in ck.tensors.values())
        assert f"step {ck.step + 1}" in str(err.value)

    def test_image_size_mismatch(self, tiny_data):
        cfg = tiny_run()
        cfg = replace(cfg, encoder=replace(cfg.encoder, image_side=16))
        with pytest.raises(ValueError):
            pretrain(cfg, load_dataset(tiny_data)["train"])


class TestAnalyze:
    def test_untrained_encoder_finite_and_schema(self, tmp_path, tiny_data):
        cfg = tiny_run()
        enc, _ = build_models(cfg)
        report, row = analyze(enc, load_dataset(tiny_data), cfg, tmp_path)
        assert tuple(row) == REPORT_COLUMNS
        assert all(np.isfinite(float(row[k])) for k in ("cls_uniformity", "token_effrank", "probe_acc"))
        header = (tmp_path / "report.csv").read_text().splitlines()[0]
        assert header == ",".join(REPORT_COLUMNS)

    def test_report_matches_dump(self, tmp_path, tiny_data):
        cfg = tiny_run()
        res = pretrain(cfg, load_dataset(tiny_data)["train"])
        _, row = analyze(res.encoder, load_dataset(tiny_data), cfg, tmp_path, with_probe=False)
        assert row["probe_acc"] == ""
        cls = read_matrix(tmp_path / "cls_embeddings.snmx")
        tok = read_matrix(tmp_path / "token_embeddings.snmx")
        assert cls.shape == (32, 8) and tok.shape == (32 * 4, 8)
        assert abs(float(row["cls_uniformity"]) - measure_uniformity(cls)) <= 1e-12
        assert abs(float(row["token_uniformity"]) - measure_uniformity(tok)) <= 1e-12

    def test_plot_data(self, tmp_path, tiny_data):
        cfg = tiny_run()
        enc, _ = build_models(cfg)
        analyze(enc, load_dataset(tiny_data), cfg, tmp_path, with_probe=False)
        spec = read_csv(tmp_path / "spectrum.csv")
        assert len(spec) == 8 and float(spec[0]["cls_sv_normalized"]) == 1.0
        assert len(read_csv(tmp_path / "per_dim_stats.csv")) == 8

    def test_probe_ignores_tokens(self, tiny_data, monkeypatch):
        from sepnorm import train
        cfg = tiny_run()
        enc, _ = build_models(cfg)
        splits = load_dataset(tiny_data)
        before = train.probe_accuracy(enc, splits, cfg.probe, 0)
        real = enc.encode_numpy
        monkeypatch.setattr(enc, "encode_numpy", lambda x: (real(x)[0], np.full_like(real(x)[1], np.nan)))
        assert train.probe_accuracy(enc, splits, cfg.probe, 0) == before

    def test_matrix_format(self, tmp_path):
        m = np.arange(6.0).reshape(2, 3)
        write_matrix(tmp_path / "m.snmx", m)
        raw = (tmp_path / "m.snmx").read_bytes()
        assert raw[:12] == b"SNMX" + (2).to_bytes(4, "little") + (3).to_bytes(4, "little")
        assert len(raw) == 12 + 6 * 8
        assert read_matrix(tmp_path / "m.snmx").tolist() == m.tolist()


class TestAblation:
    def test_cells_dedup_lambda_zero(self):
        cells = GridSpec().cells(tiny_run())
        assert len(cells) == 40
        zero = [c for c in cells if c.objective.lam == 0]
        assert len(zero) == 4 and {c.objective.uniformity_target for c in zero} == {"none"}
        assert len({c.key() for c in cells}) == 40

    def test_single_cell_equals_pretrain_plus_analyze(self, tmp_path, tiny_data):
        base = tiny_run(steps=2)
        grid = GridSpec(schemes=("sep:bn+ln",), lambdas=(0.1,), targets=("cls",), seeds=(0,))
        res = run_grid(grid, base, tiny_data, tmp_path / "grid")
        cfg = grid.cells(base)[0]
        assert res.rows == [run_cell(cfg, tiny_data, tmp_path / "direct")]
        assert (res.cell_dirs[0] / "checkpoint.bin").read_bytes() == (tmp_path / "direct/checkpoint.bin").read_bytes()

    def test_resume_after_interruption(self, tmp_path, tiny_data, monkeypatch):
        from sepnorm import ablation
        base = tiny_run(steps=1)
        grid = GridSpec(schemes=("share:ln", "sep:bn+ln"), lambdas=(0.0, 0.1), targets=("cls",), seeds=(0,))
        calls = []
        real = ablation.run_cell

        def flaky(cfg, data, out):
            calls.append(cfg)
            if len(calls) == 3:
                raise KeyboardInterrupt
            return real(cfg, data, out)
        monkeypatch.setattr(ablation, "run_cell", flaky)
        with pytest.raises(KeyboardInterrupt):
            run_grid(grid, base, tiny_data, tmp_path)
        monkeypatch.setattr(ablation, "run_cell", real)
        res = run_grid(grid, base, tiny_data, tmp_path)
        assert res.trained == 2
        clean = run_grid(grid, base, tiny_data, tmp_path / "clean")
        assert res.rows == clean.rows
        assert run_grid(grid, base, tiny_data, tmp_path).trained == 0


class TestCli:
    def test_config_file_and_flag_precedence(self, tmp_path):
        f = tmp_path / "run.cfg"
        f.write_text("# comment\nnorm-scheme = sep:bn+ln\nlam = 0.1\ntarget = cls\nsteps = 7  # trailing\n")
        values = read_config_file(f)
        cfg = run_config_from({**values, "steps": 9})
        assert str(cfg.encoder.norm_scheme) == "sep:bn+ln"
        assert cfg.objective.lam == 0.1 and cfg.optim.steps == 9

    def test_unknown_key(self, tmp_path):
        f = tmp_path / "bad.cfg"
        f.write_text("learning_rate = 3\n")
        assert main(["pretrain", "--data", str(tmp_path), "--config", str(f)]) == 2

    def test_flags_mirror_run_config(self):
        from sepnorm.cli import RUN_FIELDS
        covered = {(sec, name) for sec, name, _ in RUN_FIELDS.values()}
        cfg = RunConfig()
        for sec in ("encoder", "objective", "optim", "probe"):
            for name in getattr(cfg, sec).__dataclass_fields__:
                if (sec, name) != ("encoder", "seed"):
                    assert (sec, name) in covered, (sec, name)

    def test_end_to_end(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv("SEPNORM_OUT", str(tmp_path / "root"))
        assert main(["gen-data", "--train-size", "32", "--test-size", "32", "--image-side", "8"]) == 0
        data = tmp_path / "root" / "data"
        assert (data / "train.snds").exists()
        flags = ["--image-side", "8", "--patch-side", "4", "--dim", "8", "--depth", "1", "--heads", "2",
                 "--decoder-depth", "1", "--decoder-dim", "8", "--decoder-heads", "2", "--batch-size", "8",
                 "--probe-epochs", "20", "--norm-scheme", "sep:bn+ln"]
        run = tmp_path / "run"
        assert main(["pretrain", "--data", str(data), "--out", str(run), "--steps", "3", *flags]) == 0
        assert main(["analyze", "--checkpoint", str(run / "checkpoint.bin"), "--data", str(data)]) == 0
        rows = read_csv(run / "report.csv")
        assert len(rows) == 1 and rows[0]["steps"] == "3" and rows[0]["token_norm"] == "LN"
        capsys.readouterr()
        assert main(["probe", "--checkpoint", str(run / "checkpoint.bin"), "--data", str(data)]) == 0
        first = capsys.readouterr().out
        assert main(["probe", "--checkpoint", str(run / "checkpoint.bin"), "--data", str(data)]) == 0
        assert capsys.readouterr().out == first
        assert f"probe_acc: {rows[0]['probe_acc']}" in first

        assert main(["ablate", "--data", str(data), "--steps", "1", "--lambdas", "0,0.1",
                     "--schemes", "share:ln", *flags[:-2]]) == 0
        report = tmp_path / "root" / "ablate" / "report.csv"
        assert [r["target"] for r in read_csv(report)] == ["none", "cls", "token", "both"]
        out = capsys.readouterr().out
        assert "trained: 4" in out

    def test_missing_data_is_an_error(self, tmp_path, capsys):
        assert main(["pretrain", "--data", str(tmp_path / "nothing"), "--out", str(tmp_path / "o")]) == 2
        assert "missing split files" in capsys.readouterr().err


def test_encoder_config_roundtrip_through_checkpoint_header(tmp_path, tiny_data):
    cfg = tiny_run("sep:ln+bn", steps=0, seed=5)
    pretrain(cfg, load_dataset(tiny_data)["train"], tmp_path)
    header = ckpt.read(tmp_path / "checkpoint.bin").encoder_config
    assert EncoderConfig.from_dict(header) == cfg.encoder
    assert json.loads(json.dumps(header)) == header
