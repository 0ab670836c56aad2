import csv

import numpy as np
import pytest

from hrdecoder import runner
from hrdecoder.cli import main, parse_grid, sweep_points
from hrdecoder.config import RunConfig, derived_seed
from hrdecoder.data import SynthConfig, generate
from hrdecoder.nets import load_checkpoint

TINY = ["--size", "128", "--count", "4", "--batch-size", "2", "--hidden-channels", "8"]


def read_rows(path):
    lines = [l for l in path.read_text().splitlines() if not l.startswith("#")]
    return list(csv.DictReader(lines))


def test_gen_data_empty(tmp_path, capsys):
    assert main(["gen-data", "--count", "0", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "manifest.txt").read_text() == ""
    assert "wrote 0 samples" in capsys.readouterr().out


def test_gen_data_reproducible(tmp_path):
    for d in ("a", "b"):
        main(["gen-data", "--count", "2", "--size", "128", "--seed", "7", "--out", str(tmp_path / d)])
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == sorted(p.name for p in (tmp_path / "b").iterdir())
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()


def test_gen_data_file_counts(tmp_path, capsys):
    assert main(["gen-data", "--count", "64", "--size", "256", "--out", str(tmp_path)]) == 0
    assert len(list(tmp_path.glob("*.img.ppm"))) == 64
    assert len(list(tmp_path.glob("*.mask_*.pgm"))) == 256
    summary = capsys.readouterr().out
    assert "MA=" in summary and "blobs" in summary


def test_gen_data_failure_exit_code(tmp_path, capsys):
    assert main(["gen-data", "--count", "1", "--size", "32", "--out", str(tmp_path)]) == 2
    assert "generation failed" in capsys.readouterr().err


def test_train_zero_iters_is_init(tmp_path):
    out = tmp_path / "run"
    assert main(["train", *TINY, "--iters", "0", "--seed", "3", "--out", str(out), "--quiet"]) == 0
    ckpt = load_checkpoint(out / runner.CHECKPOINT)
    cfg = RunConfig.from_text(ckpt.config_text)
    init = runner.init_model(cfg)
    assert ckpt.step == 0
    for name, t in init.params.items():
        assert np.array_equal(ckpt.params[name], t.data)


def test_train_lambda_zero(tmp_path):
    out = tmp_path / "run"
    assert main(["train", *TINY, "--iters", "3", "--lambda", "0", "--out", str(out), "--quiet"]) == 0
    rows = read_rows(out / runner.TRAIN_LOG)
    assert len(rows) == 3
    for r in rows:
        assert float(r["L_HR"]) > 0
        assert r["L"] == r["L_Seg"]


def test_train_log_header_and_checkpoints(tmp_path):
    out = tmp_path / "run"
    main(["train", *TINY, "--iters", "4", "--checkpoint-every", "2", "--out", str(out), "--quiet"])
    first = (out / runner.TRAIN_LOG).read_text().splitlines()[0]
    cfg = RunConfig.from_text(load_checkpoint(out / runner.CHECKPOINT).config_text)
    assert first == f"# config_hash={cfg.hash()}"
    assert sorted(p.name for p in out.glob("ckpt_*.hrsk")) == ["ckpt_000002.hrsk", "ckpt_000004.hrsk"]
    assert (out / "ckpt_000004.hrsk").read_bytes() == (out / runner.CHECKPOINT).read_bytes()


def test_train_reproducible(tmp_path):
    for d in ("a", "b"):
        main(["train", *TINY, "--iters", "3", "--seed", "11", "--out", str(tmp_path / d), "--quiet"])
    for name in (runner.CHECKPOINT, runner.TRAIN_LOG):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_train_config_file_and_flag_override(tmp_path):
    conf = tmp_path / "c.ini"
    conf.write_text("[hr]\nsigma = 1\nnum_crops = 0\n[optim]\niters = 2\n")
    out = tmp_path / "run"
    main(["train", *TINY, "--config", str(conf), "--iters", "1", "--out", str(out), "--quiet"])
    cfg = RunConfig.from_text(load_checkpoint(out / runner.CHECKPOINT).config_text)
    assert (cfg.sigma, cfg.num_crops, cfg.iters) == (1, 0, 1)


def test_train_nan_aborts(tmp_path, capsys):
    out = tmp_path / "run"
    code = main(["train", *TINY, "--iters", "5", "--optimizer", "sgd", "--lr", "1e30", "--out", str(out), "--quiet"])
    assert code == 2
    err = capsys.readouterr().err
    assert "non-finite" in err and "step" in err and "L_Seg=" in err


def test_eval_twice_identical(tmp_path, capsys):
    out = tmp_path / "run"
    main(["train", *TINY, "--iters", "2", "--out", str(out), "--quiet"])
    assert main(["eval", "--out", str(out)]) == 0
    first = {p.name: p.read_bytes() for p in out.glob("*.csv")}
    assert main(["eval", "--out", str(out)]) == 0
    second = {p.name: p.read_bytes() for p in out.glob("*.csv")}
    assert first == second
    assert {"metrics.csv", "prcurve_EX.csv", "prcurve_MA.csv"} <= set(first)
    rows = read_rows(out / "metrics.csv")
    assert [r["class"] for r in rows] == ["EX", "HE", "SE", "MA", "mean"]
    assert "mean" in capsys.readouterr().out


def test_eval_shape_mismatch(tmp_path, capsys):
    out = tmp_path / "run"
    main(["train", *TINY, "--iters", "0", "--out", str(out), "--quiet"])
    assert main(["eval", "--out", str(out), "--hidden-channels", "6"]) == 2
    assert "does not match" in capsys.readouterr().err


def test_oracle_predictions_score_one(tmp_path):
    samples = generate(SynthConfig(count=2, size=(128, 128), seed=1))
    lookup = {s.image.tobytes(): s.mask for s in samples}
    summary = runner.evaluate(lambda img: lookup[img.tobytes()], samples, 4, tmp_path)
    for c in summary["classes"]:
        if c["pixels"] and not np.isnan(c["AUPR"]):
            assert c["IoU"] == c["F"] == c["AUPR"] == 1.0
    assert summary["mAUPR"] == 1.0


def test_bench_single_strategy(tmp_path):
    assert main(["bench", "--strategies", "lr_only", "--size", "64", "--no-timing", "--out", str(tmp_path)]) == 0
    rows = read_rows(tmp_path / "costs.csv")
    assert len(rows) == 1 and rows[0]["strategy"] == "lr_only"


def test_bench_flop_ordering(tmp_path):
    assert main(["bench", "--size", "64", "--runs", "2", "--warmup", "1", "--out", str(tmp_path)]) == 0
    rows = read_rows(tmp_path / "costs.csv")
    assert [r["strategy"] for r in rows] == ["lr_only", "hrdecoder(sigma=2)", "encoder_multipass(sigma=2)"]
    assert [int(r["encoder_passes"]) for r in rows] == [1, 1, 5]
    assert all(float(r["latency_ms"]) > 0 for r in rows)
    assert (tmp_path / "costs.csv").read_text().startswith("# config_hash=")


def test_parse_grid():
    grid = parse_grid(["M=0,1,2,4", "δ=0,0.25", "lambda=0.1"])
    assert grid == [("num_crops", ["0", "1", "2", "4"]), ("crop_factor", ["0", "0.25"]), ("hr_lambda", ["0.1"])]
    with pytest.raises(ValueError):
        parse_grid(["bogus=1"])
    with pytest.raises(ValueError):
        parse_grid(["M"])


def test_sweep_seeds_distinct():
    points = sweep_points(RunConfig(seed=4), parse_grid(["M=0,1,2"]))
    assert [p.num_crops for _, _, p in points] == [0, 1, 2]
    seeds = [p.seed for _, _, p in points]
    assert len(set(seeds)) == 3
    assert seeds[2] == derived_seed(4, "num_crops=2")


def test_sweep_single_point_matches_train_eval(tmp_path):
    common = [*TINY, "--iters", "2", "--seed", "5"]
    sweep_dir = tmp_path / "sweep"
    assert main(["sweep", *common, "--grid", "M=1", "--eval-count", "2", "--out", str(sweep_dir)]) == 0
    point = sweep_dir / "num_crops=1"

    seed = derived_seed(5, "num_crops=1")
    direct = tmp_path / "direct"
    main(["train", *TINY, "--iters", "2", "--seed", str(seed), "--crops", "1", "--out", str(direct), "--quiet"])
    main(["eval", "--out", str(direct), "--offset", "4", "--count", "2"])

    assert (point / runner.CHECKPOINT).read_bytes() == (direct / runner.CHECKPOINT).read_bytes()
    assert (point / "metrics.csv").read_text().splitlines()[1:] == (direct / "metrics.csv").read_text().splitlines()[1:]

    rows = read_rows(sweep_dir / "sweep.csv")
    assert len(rows) == 5 * 3
    mean_iou = [r for r in rows if r["class"] == "mean" and r["metric"] == "IoU"]
    assert mean_iou[0]["param"] == "num_crops" and mean_iou[0]["value"] == "1"
