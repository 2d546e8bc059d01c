import json

import numpy as np
import pytest

from bidganet.cli import run
from bidganet.data import read_raster, synth_sample, write_raster


def lines(capsys):
    out = capsys.readouterr().out
    return [json.loads(l) for l in out.splitlines() if l.strip()]


def write_config(path, **sections):
    path.write_text(json.dumps(sections))
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """A 3-class Light checkpoint trained for a few iterations via the CLI."""
    root = tmp_path_factory.mktemp("run")
    cfg = write_config(root / "c.json",
                       network={"version": "light", "num_classes": 3},
                       train={"total_iters": 4, "batch_size": 2, "crop": [64, 64], "log_every": 1},
                       data={"synthetic": {"n": 4, "size": [64, 64], "classes": 3}})
    code = run(["--seed", "1", "train", "--config", str(cfg), "--out", str(root / "out")])
    assert code == 0
    return root


def test_train_outputs(trained):
    assert (trained / "out" / "final.bdgn").exists()


def test_train_deterministic_json(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json",
                       network={"version": "light", "num_classes": 3},
                       train={"total_iters": 2, "batch_size": 1, "crop": [32, 32], "log_every": 1},
                       data={"synthetic": {"n": 2, "size": [64, 64]}})
    runs = []
    for i in range(2):
        assert run(["--seed", "3", "train", "--config", str(cfg), "--out", str(tmp_path / f"o{i}")]) == 0
        recs = [r for r in lines(capsys) if "iter" in r]
        for r in recs:
            r.pop("wall_ms")
        runs.append(recs)
    assert runs[0] == runs[1] and len(runs[0]) == 2


def test_infer_labels_within_trained_set(trained, capsys):
    s = synth_sample(0, (64, 64), 3, normalized=False)
    write_raster(trained / "img.ppm", (s.image * 255).round().astype(np.uint8))
    code = run(["infer", "--ckpt", str(trained / "out" / "final.bdgn"), "--in", str(trained / "img.ppm"),
                "--out", str(trained / "pred.pgm"), "--color", str(trained / "pred.ppm")])
    assert code == 0
    out = lines(capsys)[-1]
    pred = read_raster(trained / "pred.pgm")
    assert pred.shape == (64, 64)
    assert set(np.unique(pred)) <= {0, 1, 2}
    assert set(out["labels"]) <= {0, 1, 2}
    assert read_raster(trained / "pred.ppm").shape == (3, 64, 64)


def test_eval_reports_miou(trained, capsys):
    for i in range(2):
        s = synth_sample(i, (64, 64), 3, normalized=False)
        write_raster(trained / f"e{i}.ppm", (s.image * 255).round().astype(np.uint8))
        write_raster(trained / f"e{i}.pgm", s.label)
    (trained / "m.json").write_text(json.dumps([[f"e{i}.ppm", f"e{i}.pgm", f"e{i}"] for i in range(2)]))
    assert run(["eval", "--ckpt", str(trained / "out" / "final.bdgn"),
                "--manifest", str(trained / "m.json")]) == 0
    captured = capsys.readouterr()
    rec = json.loads(captured.out.strip().splitlines()[-1])
    assert len(rec["per_class_iou"]) == 3 and 0 <= rec["miou"] <= 1
    assert "mIoU" in captured.err


def test_params_monotone(capsys):
    totals = []
    for v in ("light", "base", "large"):
        assert run(["params", "--version", v]) == 0
        rec = lines(capsys)[-1]
        assert sum(rec["breakdown"].values()) == rec["total"]
        totals.append(rec["total"])
    assert totals[0] < totals[1] < totals[2]


def test_bench_small(tmp_path, capsys):
    cfg = write_config(tmp_path / "b.json", network={"version": "light", "num_classes": 3},
                       bench={"warmup_runs": 1, "timed_runs": 2, "resolutions": [[64, 64], [64, 128]]})
    assert run(["bench", "--config", str(cfg)]) == 0
    reps = lines(capsys)
    assert [r["resolution"] for r in reps] == [[64, 64], [64, 128]]
    for r in reps:
        assert r["fps"] == pytest.approx(1000 / r["median_ms"])
        assert r["null_median_ms"] < r["median_ms"]
        assert r["ga_stage"]["runs"] == 2


def test_check_quick(capsys):
    assert run(["check", "--quick"]) == 0
    assert all(r["passed"] for r in lines(capsys))


def test_exit_codes(tmp_path, capsys):
    assert run([]) == 1
    assert run(["frobnicate"]) == 1
    bad = write_config(tmp_path / "bad.json", network={"version": "light", "width": 3})
    assert run(["train", "--config", str(bad)]) == 1
    assert run(["train", "--config", str(tmp_path / "missing.json")]) == 2
    assert run(["infer", "--ckpt", str(tmp_path / "none.bdgn"), "--in", "x.ppm", "--out", "y.pgm"]) == 2
    nodata = write_config(tmp_path / "nodata.json", network={"version": "light"}, train={"total_iters": 1})
    assert run(["train", "--config", str(nodata)]) == 1
    (tmp_path / "broken.json").write_text("{")
    assert run(["bench", "--config", str(tmp_path / "broken.json")]) == 1


def test_numeric_abort_exit_code(tmp_path, monkeypatch):
    from bidganet import cli
    cfg = write_config(tmp_path / "c.json", network={"version": "light", "num_classes": 3},
                       train={"total_iters": 1, "batch_size": 1, "crop": [64, 64]},
                       data={"synthetic": {"n": 1}})
    real = cli.build_model

    def poisoned(net):
        m = real(net)
        m.head.cls.bias.data[:] = np.nan
        return m

    monkeypatch.setattr(cli, "build_model", poisoned)
    assert run(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3
