from pathlib import Path

import pytest

from histoexpr.cli import EXIT_CONFIG, EXIT_MISSING, EXIT_OK, EXIT_USAGE, build_parser, main

SMALL = Path(__file__).resolve().parents[1] / "configs" / "synthetic_small.ini"


@pytest.fixture
def config(tmp_path):
    text = SMALL.read_text().replace("../work/synthetic_small", str(tmp_path / "work"))
    p = tmp_path / "c.ini"
    p.write_text(text)
    return p


def test_status_on_fresh_dir(config, capsys):
    assert main(["status", "--config", str(config)]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "ingest\tpending" and len(lines) == 13


def test_evaluate_first_is_missing_artifact(config):
    assert main(["evaluate", "--config", str(config)]) == EXIT_MISSING
    assert main(["run", "--stage", "evaluate", "--config", str(config)]) == EXIT_MISSING


def test_stage_then_status(config, capsys):
    assert main(["ingest", "--config", str(config)]) == EXIT_OK
    assert main(["filter", "--config", str(config)]) == EXIT_OK
    capsys.readouterr()
    main(["status", "--config", str(config)])
    out = capsys.readouterr().out
    assert "ingest\tcomplete" in out and "filter\tcomplete" in out and "cluster\tpending" in out


def test_config_errors(tmp_path, config):
    assert main(["status", "--config", str(tmp_path / "nope.ini")]) == EXIT_CONFIG
    bad = tmp_path / "bad.ini"
    bad.write_text("[mystery]\na = 1\n")
    assert main(["status", "--config", str(bad)]) == EXIT_CONFIG
    assert main(["status", "--config", str(config), "--seed-override", "colour=3"]) == EXIT_CONFIG


def test_usage_errors(config):
    for argv in ([], ["frobnicate"], ["status"], ["run", "--config", str(config), "--stage", "nope"]):
        with pytest.raises(SystemExit) as e:
            main(argv)
        assert e.value.code == EXIT_USAGE


def test_synthesize(config, tmp_path):
    out = tmp_path / "cohort"
    assert main(["synthesize", "--config", str(config), "--out", str(out)]) == EXIT_OK
    assert any(out.iterdir())


def test_parser_has_every_stage():
    from histoexpr.config import STAGES

    sub = next(a for a in build_parser()._actions if a.dest == "command")
    assert set(STAGES) | {"run", "run-all", "status", "synthesize"} == set(sub.choices)
