import filecmp
import json
import shutil
from dataclasses import replace
from pathlib import Path

import pytest

from histoexpr.config import STAGES, load_config, parse_overrides
from histoexpr.pipeline import (
    DigestMismatchError, MissingArtifactError, PipelineError, Run, downstream_of, reset_work_dir,
)
from histoexpr.stats import read_ledger

TINY = Path(__file__).resolve().parents[1] / "configs" / "synthetic_small.ini"


def tiny_config(work, **seed_overrides):
    return replace(load_config(TINY, seed_overrides), work_dir=work)


@pytest.fixture(scope="module")
def finished(tmp_path_factory):
    work = tmp_path_factory.mktemp("run")
    run = Run(tiny_config(work))
    run.run_all()
    return work


def test_all_stages_complete(finished):
    m = json.loads((finished / "manifest.json").read_text())
    assert sorted(m["stages"]) == sorted(STAGES)
    assert all(rec["status"] == "complete" for rec in m["stages"].values())
    assert Run(tiny_config(finished)).audit() == []


def test_manifest_records_inputs(finished):
    m = json.loads((finished / "manifest.json").read_text())
    assert m["stages"]["ingest"]["inputs"] == {}
    for stage in ("evaluate", "report"):
        assert m["stages"][stage]["inputs"]
    assert "config_digest" in m and "time" not in json.dumps(m)


def test_report_outputs(finished):
    rep = finished / "report"
    for mode in ("corr_clusters", "rnd_clusters", "all_gene", "per_gene"):
        assert (rep / f"boxplot_{mode}.svg").stat().st_size > 0
    ledger = read_ledger(finished / "evaluate" / "ledger.tsv")
    gates = dict(line.split("\t") for line in (rep / "gates.tsv").read_text().splitlines()[1:])
    assert int(gates["evaluated"]) == len(ledger)
    assert int(gates["cv_pass"]) == sum(e.significant_cv for e in ledger)


def test_rerun_stage_is_byte_identical(finished, tmp_path):
    work = tmp_path / "copy"
    shutil.copytree(finished, work)
    run = Run(tiny_config(work))
    run.run_stage("cluster")
    for name in ("dendrogram.txt", "assignment.tsv", "cluster_stats.tsv"):
        assert filecmp.cmp(finished / "cluster" / name, work / "cluster" / name, shallow=False)
    # rerunning a stage invalidates everything downstream of it
    assert run.status("cluster") == "complete"
    assert all(run.status(s) == "pending" for s in downstream_of("cluster"))


def test_evaluate_before_predict(tmp_path):
    run = Run(tiny_config(tmp_path))
    with pytest.raises(MissingArtifactError):
        run.run_stage("evaluate")


def test_digest_mismatch(finished, tmp_path):
    work = tmp_path / "copy"
    shutil.copytree(finished, work)
    with pytest.raises(DigestMismatchError):
        Run(tiny_config(work, training=99))
    reset_work_dir(work)
    assert not (work / "manifest.json").exists()
    Run(tiny_config(work, training=99))


def test_tampered_artifact_detected(finished, tmp_path):
    work = tmp_path / "copy"
    shutil.copytree(finished, work)
    with open(work / "filter" / "expression.tsv", "a") as fh:
        fh.write("\n")
    run = Run(tiny_config(work))
    assert any("modified" in p for p in run.audit())
    with pytest.raises(MissingArtifactError, match="changed"):
        run.run_stage("cluster")


def test_unknown_stage(tmp_path):
    with pytest.raises(PipelineError):
        Run(tiny_config(tmp_path)).run_stage("nope")


def test_downstream_of():
    assert downstream_of("report") == []
    assert set(downstream_of("predict")) == {"evaluate", "ccp", "cox", "gsea", "report"}
