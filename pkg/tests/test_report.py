import csv
import math

import numpy as np
import pytest

from histoexpr.report import ReportError, boxplot_svg, ci_plot_svg, cluster_chart_svg, gate_counts
from histoexpr.stats import TranscriptEvaluation, evaluate_transcripts, read_ledger, write_ledger


def _recount(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh, delimiter="\t"))
    truthy = ("True", "true", "1")
    return {"evaluated": len(rows),
            "cv_pass": sum(r["significant_cv"] in truthy for r in rows),
            "test_pass": sum(r["validated_test"] in truthy for r in rows)}


def test_gate_counts_match_recount(tmp_path):
    rng = np.random.default_rng(4)
    n_cv, n_test, g = 40, 20, 30
    truth = rng.normal(size=(n_cv, g))
    pred = truth.copy()
    pred[:, 10:] = rng.normal(size=(n_cv, 20))
    ttruth = rng.normal(size=(n_test, g))
    tpred = ttruth + 0.1 * rng.normal(size=(n_test, g))
    tpred[:, 5:10] = rng.normal(size=(n_test, 5))
    ids = [f"g{i}" for i in range(g)]
    ledger = evaluate_transcripts(ids, [f"p{i}" for i in range(n_cv)], pred, truth,
                                  [f"t{i}" for i in range(n_test)], tpred, ttruth)
    write_ledger(tmp_path / "ledger.tsv", ledger)
    counts = gate_counts(read_ledger(tmp_path / "ledger.tsv"))
    assert counts == _recount(tmp_path / "ledger.tsv")
    assert counts["evaluated"] == 30 and counts["cv_pass"] >= 10 and 0 < counts["test_pass"] <= 10


def test_all_significant():
    ledger = [TranscriptEvaluation(f"g{i}", 0.9, 1e-9, 1e-8, 0.9, 1e-6, 1e-5, "10X", True, True)
              for i in range(5)]
    assert gate_counts(ledger) == {"evaluated": 5, "cv_pass": 5, "test_pass": 5}


def test_empty_ledger():
    with pytest.raises(ReportError, match="empty ledger"):
        gate_counts([])


def test_svgs_are_wellformed():
    import xml.etree.ElementTree as ET

    for text in (boxplot_svg([0.1, 0.5, math.nan, 0.9, -0.95], "x & y"),
                 boxplot_svg([], "empty"),
                 cluster_chart_svg([3, 5, 1], [0.8, None, math.nan]),
                 ci_plot_svg([("a", 1.5, 1.1, 2.0), ("b", 0.7, 0.5, 0.9)], "hr", log_scale=True, reference=1.0),
                 ci_plot_svg([], "none")):
        root = ET.fromstring(text)
        assert root.tag.endswith("svg")
