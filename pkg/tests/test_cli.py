"""CLI behavior: exit-code contract, file artifacts, determinism."""

import json
import xml.etree.ElementTree as ET
from pathlib import Path

import pytest

from densecotrain.cli import load_predictions, load_vector, main, save_predictions
from densecotrain.data import ImageRecord, load_annotations
from densecotrain.geom import Box, GroundTruth, ScoredBox


def run_cli(argv):
    try:
        return main([str(a) for a in argv])
    except SystemExit as exc:  # argparse usage errors
        return exc.code


def read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


@pytest.fixture()
def dataset_dir(tmp_path):
    out = tmp_path / "ds"
    code = run_cli(
        ["synth-gen", "--images", 12, "--rows", 3, "--cols", 4,
         "--overlap", 0.2, "--seed", 7, "--out", out]
    )
    assert code == 0
    return out


def tiny_config(tmp_path, **cotrain_overrides) -> Path:
    doc = {
        "seed": 5,
        "output_dir": str(tmp_path / "run"),
        "dataset": {
            "source": "synthetic",
            "n_labeled": 40,
            "n_unlabeled": 60,
            "grid_rows": 3,
            "grid_cols": 4,
            "row_range": [3, 4],
            "col_range": [3, 5],
            "overlap_factor": 0.4,
        },
        "cotrain": {"max_rounds": 1, "tau_conf": 0.8, **cotrain_overrides},
    }
    path = tmp_path / "config.json"
    path.write_text(json.dumps(doc), encoding="utf-8")
    return path


# ---------------------------------------------------------------- synth-gen


def test_synth_gen_counts(dataset_dir, capsys):
    csv_lines = (dataset_dir / "annotations.csv").read_text().splitlines()
    assert len(csv_lines) == 1 + 12 * 3 * 4  # header + one row per box
    assert (dataset_dir / "manifest.json").is_file()


def test_synth_gen_prints_counts(tmp_path, capsys):
    code = run_cli(
        ["synth-gen", "--images", 10, "--rows", 5, "--cols", 8,
         "--seed", 7, "--out", tmp_path / "g"]
    )
    assert code == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["images"] == 10
    assert payload["boxes"] == 400


def test_synth_gen_rerun_byte_identical(tmp_path):
    args = ["synth-gen", "--images", 6, "--rows", 2, "--cols", 3, "--seed", 9]
    assert run_cli(args + ["--out", tmp_path / "a"]) == 0
    assert run_cli(args + ["--out", tmp_path / "b"]) == 0
    a = (tmp_path / "a" / "annotations.csv").read_bytes()
    b = (tmp_path / "b" / "annotations.csv").read_bytes()
    assert a == b


def test_synth_gen_missing_seed_exits_2(tmp_path, capsys):
    code = run_cli(
        ["synth-gen", "--images", 3, "--rows", 2, "--cols", 2,
         "--out", tmp_path / "x"]
    )
    assert code == 2
    assert "--seed" in capsys.readouterr().err


def test_synth_gen_invalid_flags_exit_2(tmp_path):
    base = ["synth-gen", "--seed", 1, "--out", tmp_path / "x"]
    assert run_cli(base + ["--images", 0, "--rows", 2, "--cols", 2]) == 2
    assert run_cli(base + ["--images", 2, "--rows", 2, "--cols", 2,
                           "--overlap", 1.5]) == 2


def test_synth_gen_unwritable_out_exits_3(tmp_path):
    blocker = tmp_path / "blocker"
    blocker.write_text("a file, not a dir", encoding="utf-8")
    code = run_cli(
        ["synth-gen", "--images", 2, "--rows", 2, "--cols", 2, "--seed", 1,
         "--out", blocker / "sub"]
    )
    assert code == 3


# -------------------------------------------------------------------- split


def test_split_writes_counts(dataset_dir, tmp_path, capsys):
    out = tmp_path / "sp"
    code = run_cli(
        ["split", "--annotations", dataset_dir / "annotations.csv",
         "--n-labeled", 10, "--n-unlabeled", 2, "--seed", 3, "--out", out]
    )
    assert code == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["train"] == 7 and payload["val"] == 1 and payload["test"] == 2
    assert payload["unlabeled_pool"] == 2
    doc = read_json(out / "split.json")
    ids = (doc["split"]["train"] + doc["split"]["val"] + doc["split"]["test"]
           + doc["split"]["unlabeled_pool"])
    assert len(ids) == len(set(ids)) == 12


def test_split_deterministic(dataset_dir, tmp_path):
    outs = []
    for name in ("s1", "s2"):
        out = tmp_path / name
        assert run_cli(
            ["split", "--annotations", dataset_dir / "annotations.csv",
             "--n-labeled", 10, "--n-unlabeled", 2, "--seed", 3, "--out", out]
        ) == 0
        outs.append((out / "split.json").read_bytes())
    assert outs[0] == outs[1]


def test_split_bad_fractions_exit_2(dataset_dir, tmp_path):
    code = run_cli(
        ["split", "--annotations", dataset_dir / "annotations.csv",
         "--fractions", "0.5,0.4,0.2", "--n-labeled", 10, "--n-unlabeled", 2,
         "--seed", 1, "--out", tmp_path / "x"]
    )
    assert code == 2


def test_split_missing_annotations_exit_3(tmp_path):
    code = run_cli(
        ["split", "--annotations", tmp_path / "nope.csv", "--seed", 1,
         "--out", tmp_path / "x"]
    )
    assert code == 3


def test_split_malformed_annotations_exit_2(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text(
        "image_name,x1,y1,x2,y2,class,image_width,image_height\n"
        "img,zero,0,5,5,object,100,100\n",
        encoding="utf-8",
    )
    code = run_cli(
        ["split", "--annotations", bad, "--n-labeled", 1, "--n-unlabeled", 0,
         "--seed", 1, "--out", tmp_path / "x"]
    )
    assert code == 2


def test_split_too_few_records_exit_2(dataset_dir, tmp_path):
    code = run_cli(
        ["split", "--annotations", dataset_dir / "annotations.csv",
         "--n-labeled", 100, "--n-unlabeled", 100, "--seed", 1,
         "--out", tmp_path / "x"]
    )
    assert code == 2


# ----------------------------------------------------------------- evaluate


def test_evaluate_verbatim_predictions_map_one(dataset_dir, tmp_path, capsys):
    records = load_annotations(dataset_dir / "annotations.csv")
    preds = {
        r.image_id: [ScoredBox(g.box, 1.0, g.label) for g in r.gts]
        for r in records
    }
    pred_path = tmp_path / "preds.jsonl"
    save_predictions(preds, pred_path)
    code = run_cli(
        ["evaluate", "--predictions", pred_path,
         "--annotations", dataset_dir / "annotations.csv"]
    )
    assert code == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["map_coco"] == pytest.approx(1.0)
    assert payload["ap75"] == pytest.approx(1.0)
    assert payload["ar300"] == pytest.approx(1.0)


def test_evaluate_empty_predictions_all_zero(dataset_dir, tmp_path, capsys):
    pred_path = tmp_path / "empty.jsonl"
    pred_path.write_text("", encoding="utf-8")
    code = run_cli(
        ["evaluate", "--predictions", pred_path,
         "--annotations", dataset_dir / "annotations.csv"]
    )
    assert code == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["map_coco"] == 0.0
    assert payload["ap75"] == 0.0
    assert payload["ar300"] == 0.0


def test_evaluate_three_detection_fixture(tmp_path, capsys):
    from densecotrain.data import save_annotations

    rec = ImageRecord(
        "a", 100, 100,
        (GroundTruth(Box(0, 0, 2, 2)), GroundTruth(Box(10, 10, 12, 12))),
    )
    gt_path = tmp_path / "gt.csv"
    save_annotations([rec], gt_path)
    preds = {
        "a": [
            ScoredBox(Box(0, 0, 2, 2), 0.9),
            ScoredBox(Box(50, 50, 52, 52), 0.8),
            ScoredBox(Box(10, 10, 12, 12), 0.7),
        ]
    }
    pred_path = tmp_path / "p.jsonl"
    save_predictions(preds, pred_path)
    code = run_cli(
        ["evaluate", "--predictions", pred_path, "--annotations", gt_path]
    )
    assert code == 0
    payload = json.loads(capsys.readouterr().out)
    assert abs(payload["ap_per_threshold"]["0.50"] - 0.8350) < 1e-4


def test_evaluate_pr_svg_parses(dataset_dir, tmp_path, capsys):
    records = load_annotations(dataset_dir / "annotations.csv")
    preds = {
        r.image_id: [ScoredBox(g.box, 0.9, g.label) for g in r.gts]
        for r in records
    }
    pred_path = tmp_path / "p.jsonl"
    save_predictions(preds, pred_path)
    svg_dir = tmp_path / "svg"
    code = run_cli(
        ["evaluate", "--predictions", pred_path,
         "--annotations", dataset_dir / "annotations.csv",
         "--pr-svg", svg_dir]
    )
    assert code == 0
    files = sorted(svg_dir.glob("pr_*.svg"))
    assert len(files) == 10
    for f in files:
        ET.parse(f)  # well-formed XML


def test_evaluate_malformed_line_names_line_number(dataset_dir, tmp_path, capsys):
    pred_path = tmp_path / "bad.jsonl"
    pred_path.write_text('{"image_id": "x", "detections": []}\nnot json\n',
                         encoding="utf-8")
    code = run_cli(
        ["evaluate", "--predictions", pred_path,
         "--annotations", dataset_dir / "annotations.csv"]
    )
    assert code == 2
    assert "line 2" in capsys.readouterr().err


def test_evaluate_unknown_image_id_exit_2(dataset_dir, tmp_path):
    pred_path = tmp_path / "p.jsonl"
    pred_path.write_text(
        '{"image_id": "ghost", "detections": []}\n', encoding="utf-8"
    )
    code = run_cli(
        ["evaluate", "--predictions", pred_path,
         "--annotations", dataset_dir / "annotations.csv"]
    )
    assert code == 2


def test_evaluate_missing_predictions_exit_3(dataset_dir, tmp_path):
    code = run_cli(
        ["evaluate", "--predictions", tmp_path / "nope.jsonl",
         "--annotations", dataset_dir / "annotations.csv"]
    )
    assert code == 3


def test_predictions_roundtrip(tmp_path):
    preds = {
        "b": [ScoredBox(Box(1.25, 2.5, 3.75, 4.125), 0.625, 0)],
        "a": [],
    }
    path = tmp_path / "p.jsonl"
    save_predictions(preds, path)
    loaded = load_predictions(path)
    assert loaded == {"a": [], "b": preds["b"]}


# ------------------------------------------------------------------ cotrain


def test_cotrain_run_artifacts(tmp_path, capsys):
    cfg_path = tiny_config(tmp_path)
    code = run_cli(["cotrain", "--config", cfg_path])
    assert code == 0
    report = json.loads(capsys.readouterr().out)
    run_dir = tmp_path / "run"
    assert (run_dir / "report.json").is_file()
    assert (run_dir / "history.csv").is_file()
    assert (run_dir / "checkpoint_round_000.json").is_file()
    assert (run_dir / "checkpoint_round_001.json").is_file()
    assert report["rounds_completed"] == 1
    assert len(report["history"]) == 2
    hist_rows = (run_dir / "history.csv").read_text().splitlines()
    assert len(hist_rows) == 3  # header + 2 rounds


def test_cotrain_rerun_identical_reports(tmp_path):
    cfg_path = tiny_config(tmp_path)
    assert run_cli(["cotrain", "--config", cfg_path]) == 0
    first = read_json(tmp_path / "run" / "report.json")
    assert run_cli(["cotrain", "--config", cfg_path]) == 0
    second = read_json(tmp_path / "run" / "report.json")
    first.pop("timings")
    second.pop("timings")
    assert first == second


def test_cotrain_max_rounds_zero_equals_supervised(tmp_path):
    cfg_path = tiny_config(tmp_path)
    assert run_cli(["cotrain", "--config", cfg_path, "--max-rounds", 0,
                    "--out", tmp_path / "r0"]) == 0
    assert run_cli(["cotrain", "--config", cfg_path, "--baseline", "supervised",
                    "--out", tmp_path / "rsup"]) == 0
    r0 = read_json(tmp_path / "r0" / "report.json")
    rsup = read_json(tmp_path / "rsup" / "report.json")
    assert r0["report_combined"] == rsup["report_combined"]
    assert r0["report_a"] == rsup["report_a"]
    assert r0["history"][0] == rsup["history"][0]


def test_cotrain_baseline_self_train(tmp_path):
    cfg_path = tiny_config(tmp_path)
    assert run_cli(["cotrain", "--config", cfg_path, "--baseline", "self-train",
                    "--out", tmp_path / "st"]) == 0
    report = read_json(tmp_path / "st" / "report.json")
    assert report["mode"] == "selftrain"


def test_cotrain_config_missing_seed_exit_2(tmp_path, capsys):
    path = tmp_path / "noseed.json"
    path.write_text(json.dumps({"dataset": {"source": "synthetic"}}),
                    encoding="utf-8")
    assert run_cli(["cotrain", "--config", path]) == 2
    assert "seed" in capsys.readouterr().err


def test_cotrain_config_bad_fractions_exit_2(tmp_path):
    path = tmp_path / "badfrac.json"
    path.write_text(
        json.dumps({"seed": 1, "dataset": {"fractions": [0.5, 0.4, 0.2]}}),
        encoding="utf-8",
    )
    assert run_cli(["cotrain", "--config", path]) == 2


def test_cotrain_config_invalid_json_exit_2(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json", encoding="utf-8")
    assert run_cli(["cotrain", "--config", path]) == 2


def test_cotrain_missing_config_file_exit_3(tmp_path):
    assert run_cli(["cotrain", "--config", tmp_path / "absent.json"]) == 3


def test_cotrain_bad_tau_override_exit_2(tmp_path):
    cfg_path = tiny_config(tmp_path)
    assert run_cli(["cotrain", "--config", cfg_path, "--tau", 7.5]) == 2


def test_cotrain_midrun_failure_exit_4_with_checkpoint(tmp_path, monkeypatch):
    import densecotrain.cotrain as ct

    cfg_path = tiny_config(tmp_path)

    def boom(*args, **kwargs):
        raise RuntimeError("injected mid-run failure")

    monkeypatch.setattr(ct, "generate_pseudo_labels", boom)
    code = run_cli(["cotrain", "--config", cfg_path, "--out", tmp_path / "crash"])
    assert code == 4
    assert (tmp_path / "crash" / "crash_state.json").is_file()


def test_cotrain_invalid_hyper_vector_exit_2(tmp_path):
    cfg_path = tiny_config(tmp_path)
    bad = tmp_path / "vec.json"
    bad.write_text(json.dumps({"genes": {"lr_xgb": 99}}), encoding="utf-8")
    assert run_cli(["cotrain", "--config", cfg_path, "--hyper", bad]) == 2


# --------------------------------------------------------------------- tune


def test_tune_budget_one_trace(tmp_path, capsys):
    cfg_path = tiny_config(tmp_path)
    out = tmp_path / "tuned"
    code = run_cli(["tune", "--config", cfg_path, "--budget", 1, "--out", out])
    assert code == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["n_evaluations"] == 1
    rows = (out / "tune_trace.csv").read_text().splitlines()
    assert len(rows) == 2  # header + exactly one data row


def test_tune_vector_reloads_and_feeds_cotrain(tmp_path):
    cfg_path = tiny_config(tmp_path)
    out = tmp_path / "tuned"
    assert run_cli(["tune", "--config", cfg_path, "--budget", 2,
                    "--population", 2, "--out", out]) == 0
    v = load_vector(out / "best_vector.json")  # validates on load
    assert run_cli(
        ["cotrain", "--config", cfg_path, "--hyper", out / "best_vector.json",
         "--max-rounds", 0, "--out", tmp_path / "with-vec"]
    ) == 0


def test_tune_sa_monotone_best_so_far(tmp_path):
    cfg_path = tiny_config(tmp_path)
    out = tmp_path / "sa"
    code = run_cli(["tune", "--config", cfg_path, "--algorithm", "sa",
                    "--budget", 50, "--out", out])
    assert code == 0
    import csv as csvmod

    with open(out / "tune_trace.csv", newline="", encoding="utf-8") as fh:
        rows = list(csvmod.DictReader(fh))
    assert len(rows) == 50
    best = [float(r["best_so_far"]) for r in rows]
    assert all(b2 >= b1 for b1, b2 in zip(best, best[1:]))


def test_tune_objective_failure_exit_4_dumps_vector(tmp_path, monkeypatch):
    import densecotrain.cli as cli_mod

    cfg_path = tiny_config(tmp_path)

    def failing_factory(records, split, base):
        def obj(v):
            raise RuntimeError("objective blew up")
        return obj

    monkeypatch.setattr(cli_mod, "make_supervised_objective", failing_factory)
    out = tmp_path / "fail"
    code = run_cli(["tune", "--config", cfg_path, "--budget", 2,
                    "--population", 2, "--out", out])
    assert code == 4
    assert (out / "failed_vector.json").is_file()


# ------------------------------------------------------------------- report


def test_report_renders_table_and_svg(tmp_path, capsys):
    cfg_path = tiny_config(tmp_path)
    assert run_cli(["cotrain", "--config", cfg_path]) == 0
    capsys.readouterr()
    run_dir = tmp_path / "run"
    code = run_cli(["report", "--run", run_dir])
    assert code == 0
    out = capsys.readouterr().out
    for token in ("view A", "view B", "combined", "mAP", "AP.75", "AR@300"):
        assert token in out
    svg = run_dir / "val_map.svg"
    assert svg.is_file()
    ET.parse(svg)
    assert not (run_dir / "tune_trace.svg").exists()  # no trace, plot omitted


def test_report_with_trace_plots_it(tmp_path, capsys):
    cfg_path = tiny_config(tmp_path)
    assert run_cli(["cotrain", "--config", cfg_path]) == 0
    out = tmp_path / "tuned"
    assert run_cli(["tune", "--config", cfg_path, "--budget", 2,
                    "--population", 2, "--out", out]) == 0
    run_dir = tmp_path / "run"
    (run_dir / "tune_trace.csv").write_bytes(
        (out / "tune_trace.csv").read_bytes()
    )
    capsys.readouterr()
    assert run_cli(["report", "--run", run_dir]) == 0
    trace_svg = run_dir / "tune_trace.svg"
    assert trace_svg.is_file()
    ET.parse(trace_svg)


def test_report_missing_artifacts_exit_3(tmp_path, capsys):
    code = run_cli(["report", "--run", tmp_path / "empty-dir"])
    assert code == 3
    assert "report.json" in capsys.readouterr().err
