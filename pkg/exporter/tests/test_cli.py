"""Exporter command line: JSON result lines and exit codes."""

import json
import os

import pytest

from modelexport.cli import main


def test_export_command(checkpoint_path, tmp_path, capsys):
    out = str(tmp_path / "m")
    rc = main(["export", "--checkpoint", checkpoint_path, "--out", out, "--golden", "5"])
    assert rc == 0
    result = json.loads(capsys.readouterr().out.strip())
    assert result["name"] == "toy-cnn"
    assert result["golden"] == 5
    assert os.path.exists(os.path.join(out, "manifest.json"))
    assert os.path.exists(os.path.join(out, "golden", "logits.f32"))


def test_export_fold_bn_flag(checkpoint_path, tmp_path, capsys):
    out = str(tmp_path / "m")
    rc = main(["export", "--checkpoint", checkpoint_path, "--out", out, "--fold-bn"])
    assert rc == 0
    result = json.loads(capsys.readouterr().out.strip())
    assert ["BatchNorm2d", "(folded)"] in result["mapping"]
    with open(os.path.join(out, "manifest.json")) as f:
        kinds = [l["kind"] for l in json.load(f)["layers"]]
    assert "batchnorm" not in kinds


def test_missing_checkpoint_exits_2(tmp_path, capsys):
    rc = main(["export", "--checkpoint", str(tmp_path / "no.pt"), "--out", str(tmp_path / "m")])
    assert rc == 2
    assert "error:" in capsys.readouterr().err


def test_unknown_fixture_kind_rejected_by_parser():
    with pytest.raises(SystemExit):
        main(["fixture", "--kind", "bogus", "--out", "/tmp/x"])
