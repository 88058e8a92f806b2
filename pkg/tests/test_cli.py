import csv
import json

import numpy as np
import pytest

from starmask.cli import main
from starmask.fileio import parse_config_text, read_annotation, read_dataset_manifest, read_image, write_image
from starmask.fixtures import block_texture
from starmask.geometry import contours_from_json
from starmask.raster import decode_float_dump

FAST = ["--max-iters", "60", "--resolution", "32"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert main(["synth", "--out", str(root), "--count", "3", "--size", "32"]) == 0
    return root


def test_explain_writes_artifacts(dataset, tmp_path):
    out = tmp_path / "ex"
    assert main(["explain", str(dataset / "image000.png"), "--out", str(out), *FAST]) == 0
    for name in ["contour.json", "mask.png", "mask.f32", "overlay.png", "panels.png", "trace.csv",
                 "convergence.png", "manifest.json", "resolved.cfg"]:
        assert (out / name).stat().st_size > 0, name
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["stop_reason"] == "max_iters" and manifest["iterations"] == 60
    assert len(manifest["inputs"][str(dataset / "image000.png")]) == 64
    mask = decode_float_dump((out / "mask.f32").read_bytes())
    assert mask.shape == (32, 32)
    rows = list(csv.DictReader(open(out / "trace.csv")))
    assert len(rows) == 60 and {"iter", "tau", "total", "ms_per_iter", "cos_op"} <= set(rows[0])
    assert len(contours_from_json((out / "contour.json").read_text())) == 1


def test_explain_is_deterministic_and_replayable(dataset, tmp_path):
    img = str(dataset / "image001.png")
    assert main(["explain", img, "--out", str(tmp_path / "a"), "--seed", "4", *FAST]) == 0
    assert main(["explain", img, "--out", str(tmp_path / "b"), "--seed", "4", *FAST]) == 0
    assert (tmp_path / "a/contour.json").read_bytes() == (tmp_path / "b/contour.json").read_bytes()
    assert (tmp_path / "a/mask.f32").read_bytes() == (tmp_path / "b/mask.f32").read_bytes()
    assert main(["explain", img, "--config", str(tmp_path / "a/resolved.cfg"), "--out", str(tmp_path / "c")]) == 0
    assert (tmp_path / "a/contour.json").read_bytes() == (tmp_path / "c/contour.json").read_bytes()


def test_config_file_and_flag_precedence(dataset, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment\nmax-iters = 25\nresolution = 32\nlambda_r = 0.1\n")
    assert main(["explain", str(dataset / "image000.png"), "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    assert json.loads((tmp_path / "o/manifest.json").read_text())["iterations"] == 25
    assert main(["explain", str(dataset / "image000.png"), "--config", str(cfg), "--max-iters", "30",
                 "--out", str(tmp_path / "p")]) == 0
    doc = json.loads((tmp_path / "p/manifest.json").read_text())
    assert doc["iterations"] == 30 and doc["config"]["lambda_r"] == 0.1
    bad = tmp_path / "bad.cfg"
    bad.write_text("no_such_option = 1\n")
    assert main(["explain", str(dataset / "image000.png"), "--config", str(bad)]) == 2


def test_sweep_outputs(dataset, tmp_path, capsys):
    out = tmp_path / "sw"
    assert main(["sweep", str(dataset / "image000.png"), "--out", str(out), "--alphas", "0.3,0.1",
                 "--random-circles", "3", *FAST]) == 0
    rows = list(csv.DictReader(open(out / "sweep.csv")))
    assert [float(r["alpha_target"]) for r in rows] == [0.1, 0.3]
    assert list(rows[0]) == ["alpha_target", "alpha_achieved", "cos_preserve", "cos_delete",
                             "prob_preserve", "prob_delete", "random_cos_preserve"]
    assert (out / "tradeoff.png").exists() and (out / "contour_alpha0.10.json").exists()


def test_sweep_with_logits_backend_reports_probabilities(dataset, tmp_path):
    out = tmp_path / "swl"
    assert main(["sweep", str(dataset / "image000.png"), "--backend", "linear", "--out", str(out),
                 "--alphas", "0.2", "--random-circles", "2", "--max-iters", "20", "--resolution", "24"]) == 0
    row = next(csv.DictReader(open(out / "sweep.csv")))
    assert 0.0 <= float(row["prob_preserve"]) <= 1.0


def test_empty_alpha_list_is_a_usage_error(dataset, tmp_path, capsys):
    assert main(["sweep", str(dataset / "image000.png"), "--alphas", "", "--out", str(tmp_path)]) == 2
    assert "alphas" in capsys.readouterr().err


def test_missing_input_names_the_path(tmp_path, capsys):
    missing = tmp_path / "nope.png"
    assert main(["explain", str(missing), "--out", str(tmp_path / "o")]) == 2
    assert str(missing) in capsys.readouterr().err


def test_backend_failure_exit_code(dataset, tmp_path):
    assert main(["explain", str(dataset / "image000.png"), "--backend", "external", "--endpoint",
                 "tcp://127.0.0.1:1", "--out", str(tmp_path / "o"), *FAST]) == 3
    assert main(["explain", str(dataset / "image000.png"), "--backend", "external",
                 "--out", str(tmp_path / "o"), *FAST]) == 2


def test_robustness_outputs_and_single_start_fallback(dataset, tmp_path):
    out = tmp_path / "rb"
    assert main(["robustness", str(dataset / "image000.png"), "--out", str(out), "--starts", "4",
                 "--lambda-rs", "0.1,0.001", *FAST]) == 0
    iou = list(csv.reader(open(out / "iou_matrix.csv")))
    assert len(iou) == 5 and iou[1][1] == "1.000000"
    runs = list(csv.DictReader(open(out / "runs.csv")))
    assert [r["kind"] for r in runs] == ["start"] * 4 + ["lambda_r"] * 2
    assert (out / "robustness.png").exists()
    with pytest.warns(UserWarning, match="single start"):
        assert main(["robustness", str(dataset / "image000.png"), "--out", str(tmp_path / "one"),
                     "--starts", "1", *FAST]) == 0
    assert (tmp_path / "one/contour.json").exists()
    assert main(["robustness", str(dataset / "image000.png"), "--starts", "5", "--out", str(tmp_path)]) == 2


def test_robustness_workers_match_serial(dataset, tmp_path):
    args = ["robustness", str(dataset / "image002.png"), "--starts", "4", "--lambda-rs", "0.01", *FAST]
    assert main([*args, "--out", str(tmp_path / "s")]) == 0
    assert main([*args, "--out", str(tmp_path / "w"), "--workers", "2"]) == 0
    assert (tmp_path / "s/iou_matrix.csv").read_bytes() == (tmp_path / "w/iou_matrix.csv").read_bytes()
    assert (tmp_path / "s/runs.csv").read_bytes() == (tmp_path / "w/runs.csv").read_bytes()


def test_metrics_outputs_and_determinism(dataset, tmp_path):
    args = ["metrics", str(dataset / "dataset.txt"), "--resamples", "200", "--subsets", "16", *FAST]
    assert main([*args, "--out", str(tmp_path / "a")]) == 0
    assert main([*args, "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a/metrics.csv").read_bytes() == (tmp_path / "b/metrics.csv").read_bytes()
    rows = list(csv.DictReader(open(tmp_path / "a/metrics.csv")))
    assert [r["image_id"] for r in rows] == ["img000", "img001", "img002"]
    assert list(rows[0]) == ["image_id", "rka", "rma", "complexity", "sparseness", "faithfulness"]
    summary = json.loads((tmp_path / "a/summary.json").read_text())
    assert set(summary["metrics"]) == {"rka", "rma", "complexity", "sparseness", "faithfulness"}
    assert (tmp_path / "a/metrics.png").exists()


def test_metrics_skips_missing_annotations(dataset, tmp_path, capsys):
    manifest = tmp_path / "m.txt"
    lines = [f"{dataset}/image000.png {dataset}/annotation000.png a",
             f"{dataset}/image001.png {dataset}/annotation001.png b",
             f"{dataset}/image002.png {tmp_path}/missing.png c"]
    manifest.write_text("\n".join(lines) + "\n")
    assert main(["metrics", str(manifest), "--out", str(tmp_path / "o"), "--resamples", "100",
                 "--subsets", "8", *FAST]) == 0
    assert "skipping c" in capsys.readouterr().err
    assert len(list(csv.DictReader(open(tmp_path / "o/metrics.csv")))) == 2
    manifest.write_text("\n".join([lines[0], lines[2], lines[2].replace(" c", " d")]) + "\n")
    assert main(["metrics", str(manifest), "--out", str(tmp_path / "p"), *FAST]) == 2


def test_malformed_manifest_reports_line(tmp_path, capsys):
    manifest = tmp_path / "m.txt"
    manifest.write_text("# header\na.png b.png\nonly_one_field\n")
    assert main(["metrics", str(manifest), "--out", str(tmp_path / "o")]) == 2
    assert f"{manifest}:3" in capsys.readouterr().err


def test_image_and_annotation_readers(tmp_path):
    x = block_texture(20, 30, 3, 2, seed=1)
    write_image(tmp_path / "x.png", x)
    back = read_image(tmp_path / "x.png")
    np.testing.assert_array_equal(back, x)
    assert read_image(tmp_path / "x.png", 10).shape == (10, 10, 3)
    gray = block_texture(8, 8, 1, 2, seed=2)
    write_image(tmp_path / "g.png", gray)
    assert read_image(tmp_path / "g.png").shape == (8, 8, 1)
    (tmp_path / "box.txt").write_text("10 0 20 10\n")
    box = read_annotation(tmp_path / "box.txt", (10, 15), source_shape=(20, 30))
    expected = np.zeros((10, 15), bool)
    expected[:5, 5:10] = True
    np.testing.assert_array_equal(box, expected)


def test_config_and_manifest_parsing(tmp_path):
    assert parse_config_text("a-b = 1\n\n# x\nc=two words # tail\n") == {"a_b": "1", "c": "two words"}
    with pytest.raises(OSError, match=":2:"):
        parse_config_text("a = 1\nbroken\n")
    m = tmp_path / "sub" / "set.txt"
    m.parent.mkdir()
    m.write_text("img.png ann.png\n/abs/i.png /abs/a.png named\n")
    entries = read_dataset_manifest(m)
    assert entries[0] == ("img", str(m.parent / "img.png"), str(m.parent / "ann.png"))
    assert entries[1] == ("named", "/abs/i.png", "/abs/a.png")


def test_atomic_write_leaves_nothing_on_failure(tmp_path):
    from starmask.fileio import atomic_path

    target = tmp_path / "out.bin"
    with pytest.raises(RuntimeError):
        with atomic_path(target) as tmp:
            open(tmp, "wb").write(b"partial")
            raise RuntimeError("boom")
    assert list(tmp_path.iterdir()) == []


def test_planted_dataset_mean_rma(tmp_path):
    data = tmp_path / "data"
    assert main(["synth", "--out", str(data), "--count", "10", "--size", "64"]) == 0
    args = ["metrics", str(data / "dataset.txt"), "--resolution", "64", "--max-iters", "1000",
            "--resamples", "500", "--subsets", "16"]
    assert main([*args, "--out", str(tmp_path / "a")]) == 0
    summary = json.loads((tmp_path / "a/summary.json").read_text())
    assert summary["n_images"] == 10
    assert summary["metrics"]["rma"]["mean"] > 0.9
    assert main([*args, "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a/summary.json").read_bytes() == (tmp_path / "b/summary.json").read_bytes()
