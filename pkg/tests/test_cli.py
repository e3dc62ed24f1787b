"""End-to-end command-line tests, run in process through cli.main."""

import numpy as np
import pytest

from colanet.cli import main
from colanet.config import RunConfig, save_run_config
from colanet.imageio import load_image, save_image
from colanet.network import ModelConfig, build_weights
from colanet.training import Checkpoint, save_checkpoint


def micro_model():
    return ModelConfig(variant="basic", num_cab=2, channels=4, in_channels=1,
                       fem_depth=1, patch_h=3, patch_w=3, patch_stride=3,
                       ca_reduction=4, local_bottleneck=1)


@pytest.fixture
def micro_ckpt(tmp_path):
    cfg = micro_model()
    weights = build_weights(cfg, seed=1)
    path = tmp_path / "model.bin"
    save_checkpoint(Checkpoint(cfg, weights, step=0, seed=1), path)
    return path


def write_noisy_pgm(path, shape=(24, 24), seed=0):
    rng = np.random.default_rng(seed)
    img = rng.integers(0, 256, shape).astype(np.float32)
    save_image(img, path)
    return img


class TestDenoise:
    def test_zero_tail_checkpoint_is_identity(self, tmp_path):
        cfg = micro_model()
        weights = build_weights(cfg, seed=2)
        weights["tail.weight"].value.data[:] = 0
        weights["tail.bias"].value.data[:] = 0
        ckpt_path = tmp_path / "zero_tail.bin"
        save_checkpoint(Checkpoint(cfg, weights), ckpt_path)

        src = tmp_path / "noisy.pgm"
        dst = tmp_path / "rec.pgm"
        write_noisy_pgm(src)
        code = main(["denoise", "--ckpt", str(ckpt_path), "--in", str(src),
                     "--out", str(dst)])
        assert code == 0
        assert src.read_bytes() == dst.read_bytes()

    def test_denoise_runs_tiled(self, micro_ckpt, tmp_path):
        src = tmp_path / "big.pgm"
        dst = tmp_path / "rec.pgm"
        write_noisy_pgm(src, shape=(40, 52))
        code = main(["denoise", "--ckpt", str(micro_ckpt), "--in", str(src),
                     "--out", str(dst), "--tile", "24"])
        assert code == 0
        assert load_image(dst).shape == (40, 52)

    def test_missing_checkpoint_is_io_error(self, tmp_path):
        src = tmp_path / "x.pgm"
        write_noisy_pgm(src)
        code = main(["denoise", "--ckpt", str(tmp_path / "nope.bin"),
                     "--in", str(src), "--out", str(tmp_path / "y.pgm")])
        assert code == 3

    def test_garbage_checkpoint_is_format_error(self, tmp_path):
        bad = tmp_path / "bad.bin"
        bad.write_bytes(b"NOTAMODEL" * 10)
        src = tmp_path / "x.pgm"
        write_noisy_pgm(src)
        code = main(["denoise", "--ckpt", str(bad), "--in", str(src),
                     "--out", str(tmp_path / "y.pgm")])
        assert code == 3


class TestEval:
    def test_self_comparison_sentinels(self, tmp_path, capsys):
        img_path = tmp_path / "a.pgm"
        write_noisy_pgm(img_path, shape=(16, 16))
        out_csv = tmp_path / "eval.csv"
        code = main(["eval", "--ref", str(img_path), "--test", str(img_path),
                     "--out", str(out_csv)])
        assert code == 0
        text = out_csv.read_text()
        assert text == ("file,psnr_db,ssim\n"
                        "a.pgm,inf,1.0000\n"
                        "mean,inf,1.0000\n")
        assert (tmp_path / "eval.png").exists()

    def test_directory_mode(self, tmp_path):
        ref = tmp_path / "ref"
        test = tmp_path / "test"
        ref.mkdir()
        test.mkdir()
        for i in range(2):
            img = write_noisy_pgm(ref / f"i{i}.pgm", shape=(16, 16), seed=i)
            save_image(np.clip(img + 10.0, 0, 255), test / f"i{i}.pgm")
        out_csv = tmp_path / "dir.csv"
        code = main(["eval", "--ref", str(ref), "--test", str(test),
                     "--out", str(out_csv)])
        assert code == 0
        lines = out_csv.read_text().splitlines()
        assert len(lines) == 4  # header + 2 rows + mean
        assert lines[-1].startswith("mean,")

    def test_rerun_byte_identical(self, tmp_path):
        img_path = tmp_path / "a.pgm"
        write_noisy_pgm(img_path, shape=(16, 16))
        outs = []
        for tag in ("1", "2"):
            out_csv = tmp_path / f"eval{tag}.csv"
            main(["eval", "--ref", str(img_path), "--test", str(img_path),
                  "--out", str(out_csv)])
            outs.append(out_csv.read_bytes())
        assert outs[0] == outs[1]


class TestAttnmap:
    def test_writes_heat_maps_and_distance_csv(self, micro_ckpt, tmp_path):
        src = tmp_path / "img.pgm"
        write_noisy_pgm(src, shape=(18, 18))
        out_dir = tmp_path / "maps"
        code = main(["attnmap", "--ckpt", str(micro_ckpt), "--in", str(src),
                     "--out", str(out_dir), "--cab", "1", "--tile", "12"])
        assert code == 0
        for i in range(2):
            hmap = load_image(out_dir / f"heat_cab{i}.pgm") / 255.0
            assert np.all((hmap >= 0.0) & (hmap <= 1.0))
        assert (out_dir / "heatmaps.png").exists()
        csv = (out_dir / "distance_cab1.csv").read_text()
        rows = [line.split(",") for line in csv.splitlines()]
        mat = np.array([[float(v) for v in row] for row in rows])
        assert mat.shape[0] == mat.shape[1]
        assert np.allclose(mat.sum(axis=1), 1.0, atol=2e-3)

    def test_bad_cab_index_is_usage_error(self, micro_ckpt, tmp_path):
        src = tmp_path / "img.pgm"
        write_noisy_pgm(src, shape=(12, 12))
        code = main(["attnmap", "--ckpt", str(micro_ckpt), "--in", str(src),
                     "--out", str(tmp_path / "maps"), "--cab", "9"])
        assert code == 2


class TestCensusAndTrain:
    def test_census_prints_reference_scale_total(self, tmp_path, capsys):
        cfg_path = tmp_path / "cola_b.cfg"
        save_run_config(RunConfig(), cfg_path)  # defaults = basic, 4 blocks
        code = main(["census", "--config", str(cfg_path)])
        assert code == 0
        lines = capsys.readouterr().out.strip().splitlines()
        total = int(lines[-1].split()[-1])
        assert abs(total / 1.10e6 - 1.0) <= 0.15
        assert any(line.strip().startswith("head") for line in lines)

    def test_train_writes_reports_and_checkpoint(self, tmp_path):
        data_dir = tmp_path / "data"
        data_dir.mkdir()
        for i in range(3):
            write_noisy_pgm(data_dir / f"t{i}.pgm", shape=(24, 24), seed=i)

        cfg = RunConfig()
        cfg.model = micro_model()
        cfg.train.batch_size = 2
        cfg.train.crop = 12
        cfg.train.total_epochs = 1
        cfg.train.steps_per_epoch = 3
        cfg.paths.data_dir = str(data_dir)
        cfg_path = tmp_path / "run.cfg"
        save_run_config(cfg, cfg_path)

        out_dir = tmp_path / "out"
        code = main(["train", "--config", str(cfg_path), "--out", str(out_dir),
                     "--seed", "5"])
        assert code == 0
        assert (out_dir / "ckpt_final.bin").exists()
        assert (out_dir / "loss.png").exists()
        loss_csv = (out_dir / "loss.csv").read_text()
        assert loss_csv.startswith("step,lr,loss\n")
        assert len(loss_csv.splitlines()) == 4

        # rerun into a second directory: byte-identical loss report
        out2 = tmp_path / "out2"
        main(["train", "--config", str(cfg_path), "--out", str(out2),
              "--seed", "5"])
        assert (out_dir / "loss.csv").read_bytes() == \
            (out2 / "loss.csv").read_bytes()
        assert (out_dir / "ckpt_final.bin").read_bytes() == \
            (out2 / "ckpt_final.bin").read_bytes()


class TestUsage:
    def test_no_command_is_usage_error(self, capsys):
        assert main([]) == 2

    def test_unknown_command_is_usage_error(self, capsys):
        assert main(["frobnicate"]) == 2

    def test_missing_required_flag(self, capsys):
        assert main(["denoise", "--in", "x.pgm", "--out", "y.pgm"]) == 2

    def test_help_exits_zero(self, capsys):
        assert main(["--help"]) == 0
