"""Command-line flow over real files, including the core CLI handoff."""

import json

import pytest

from havc import load_corpus, load_inference
from havc.cli import main as havc_main
from havc_exporter.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main


def run(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def test_demo_diagnostic_score_inference_round_trip(tmp_path, capsys):
    code, out, _ = run(
        capsys, "demo", "--out", str(tmp_path / "in"), "--images", "20",
        "--seed", "3",
    )
    assert code == EXIT_OK
    demo = json.loads(out)
    assert demo["images"] == 20

    code, out, _ = run(
        capsys, "diagnostic", "--items", demo["items"], "--out",
        str(tmp_path / "corp"),
    )
    assert code == EXIT_OK
    summary = json.loads(out)
    assert summary["records"] >= 10
    assert summary["skipped"] >= 1
    corpus = load_corpus(summary["manifest"])
    assert len(corpus.records) == summary["records"]

    # stage one of the core pipeline runs straight off the exported corpus
    experts_path = tmp_path / "experts.json"
    code = havc_main(["score-heads", summary["manifest"], "--out", str(experts_path)])
    capsys.readouterr()
    assert code == 0
    assert json.loads(experts_path.read_text())["heads"]

    code, out, _ = run(
        capsys, "inference", "--image", str(tmp_path / "in" / "img_000.pgm"),
        "--experts", str(experts_path), "--out", str(tmp_path / "inf"),
    )
    assert code == EXIT_OK
    doc = json.loads(out)
    record = load_inference(doc["manifest"])
    assert record.predicted_token == doc["predicted_token"]
    assert doc["has_grad"] is True

    # stage two of the core pipeline consumes the exported record
    code = havc_main(["guide", str(experts_path), doc["manifest"]])
    capsys.readouterr()
    assert code == 0


def test_inference_no_grad_flag(tmp_path, capsys):
    code, out, _ = run(
        capsys, "demo", "--out", str(tmp_path / "in"), "--images", "4",
        "--seed", "5", "--unmatched-every", "99",
    )
    assert code == EXIT_OK
    demo = json.loads(out)
    code, out, _ = run(
        capsys, "diagnostic", "--items", demo["items"], "--out", str(tmp_path / "c")
    )
    assert code == EXIT_OK
    manifest = json.loads(out)["manifest"]
    experts_path = tmp_path / "experts.json"
    assert havc_main(["score-heads", manifest, "--out", str(experts_path)]) == 0
    capsys.readouterr()

    code, out, _ = run(
        capsys, "inference", "--image", str(tmp_path / "in" / "img_000.pgm"),
        "--experts", str(experts_path), "--out", str(tmp_path / "inf"),
        "--no-grad",
    )
    assert code == EXIT_OK
    doc = json.loads(out)
    assert doc["has_grad"] is False
    assert load_inference(doc["manifest"]).grad is None


def test_unknown_model_is_a_usage_error(tmp_path, capsys):
    code, _, err = run(
        capsys, "diagnostic", "--model", "nope", "--items", "missing.json",
        "--out", str(tmp_path),
    )
    assert code == EXIT_USAGE
    assert "unknown model" in err


def test_missing_items_file_is_a_data_error(tmp_path, capsys):
    code, _, err = run(
        capsys, "diagnostic", "--items", str(tmp_path / "gone.json"),
        "--out", str(tmp_path / "out"),
    )
    assert code == EXIT_DATA
    assert err


def test_malformed_items_file_is_a_data_error(tmp_path, capsys):
    bad = tmp_path / "items.json"
    bad.write_text(json.dumps({"items": [{"word": "alpha"}]}))
    code, _, err = run(
        capsys, "diagnostic", "--items", str(bad), "--out", str(tmp_path / "out")
    )
    assert code == EXIT_DATA
    assert "malformed" in err


def test_unparseable_items_file_is_a_data_error(tmp_path, capsys):
    bad = tmp_path / "items.json"
    bad.write_text('{"items": [')
    code, _, err = run(
        capsys, "diagnostic", "--items", str(bad), "--out", str(tmp_path / "out")
    )
    assert code == EXIT_DATA
    assert "not valid JSON" in err


def test_empty_items_list_is_a_data_error(tmp_path, capsys):
    bad = tmp_path / "items.json"
    bad.write_text(json.dumps({"items": []}))
    code, _, err = run(
        capsys, "diagnostic", "--items", str(bad), "--out", str(tmp_path / "out")
    )
    assert code == EXIT_DATA
    assert "empty" in err


def test_missing_experts_file_is_a_data_error(tmp_path, capsys):
    image = tmp_path / "img.pgm"
    image.write_bytes(b"P5\n2 2\n255\n\x00\x01\x02\x03")
    code, _, err = run(
        capsys, "inference", "--image", str(image), "--experts",
        str(tmp_path / "gone.json"), "--out", str(tmp_path / "out"),
    )
    assert code == EXIT_DATA
    assert err


def test_bad_demo_counts_are_usage_errors(tmp_path, capsys):
    code, _, _ = run(
        capsys, "demo", "--out", str(tmp_path / "d"), "--images", "0"
    )
    assert code == EXIT_USAGE
    code, _, _ = run(
        capsys, "demo", "--out", str(tmp_path / "d"), "--unmatched-every", "0"
    )
    assert code == EXIT_USAGE


def test_negative_token_step_is_a_usage_error(tmp_path, capsys):
    image = tmp_path / "img.pgm"
    image.write_bytes(b"P5\n2 2\n255\n\x00\x01\x02\x03")
    experts = tmp_path / "e.json"
    experts.write_text("{}")
    code, _, err = run(
        capsys, "inference", "--image", str(image), "--experts", str(experts),
        "--out", str(tmp_path / "out"), "--token-step", "-1",
    )
    assert code == EXIT_USAGE
    assert "token step" in err


def test_unknown_subcommand_is_a_usage_error(capsys):
    assert run(capsys, "frobnicate")[0] == EXIT_USAGE
    assert run(capsys)[0] == EXIT_USAGE


def test_help_exits_clean(capsys):
    assert run(capsys, "--help")[0] == EXIT_OK
