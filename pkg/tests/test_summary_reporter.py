import hashlib
import json

from behavior_dnn.core.network_composer import SubnetAssignment
from behavior_dnn.core.regime_trainer import CVReport, RegimeResult, TrainConfig
from behavior_dnn.core.summary_reporter import SummaryReporter, regime_title, render_tables


def result(regime, accuracy, code="acceptance", gender="F"):
    return RegimeResult(code, gender, regime, accuracy, 10, 50, [])


def test_regime_titles():
    assert regime_title("sd") == "SD-DNN"
    assert regime_title("subnet:jitter_shimmer") == "Jitter & Shimmer"
    assert regime_title("subnet:subset_3") == "Subset 3"


def test_tables_split_regimes_from_feature_groups():
    results = [result("dense", 0.7), result("sd", 0.75), result("subnet:pitch", 0.6), result("fusion", 0.65),
               result("dense", 0.5, code="blame")]
    text = render_tables(results)
    main_table, split_table = text.split("Classification accuracy (%) per feature group")
    assert "Dense DNN" in main_table and "Pitch" not in main_table
    assert "75.00" in main_table
    assert "Pitch" in split_table and "Fusion" in split_table and "SD-DNN" in split_table
    blame_row = [line for line in main_table.splitlines() if line.startswith("blame")][0]
    assert blame_row.split()[-1] == "-"


def test_report_and_manifest(tmp_path):
    report = CVReport([result("dense", float("nan"))], [], ["note"],
                      SubnetAssignment.from_pairs([("all", (0, 1))], 2), TrainConfig())
    inputs = tmp_path / "frames.csv"
    inputs.write_text("x\n")
    reporter = SummaryReporter({"training": {}}, report.summary_log, 0, 0.0, {"frames": inputs})
    path = reporter.write_report(report, tmp_path / "report.json")
    document = json.loads(path.read_text())
    assert document["results"][0]["accuracy"] is None
    assert "regime" not in document["training"]
    assert document["threshold_policy"]["scope"] == "per_fold_global"
    assert document["threshold_policy"]["rule"] == "Q > T"
    assert document["threshold_policy"]["tie_break"] == "smallest"
    assert "training sessions" in document["threshold_policy"]["note"]
    manifest = json.loads(reporter.write_manifest(tmp_path / "run.json", {"report": path}).read_text())
    assert set(manifest["outputs"]) == {"report"}
    assert manifest["inputs"]["frames"]["sha256"] == hashlib.sha256(b"x\n").hexdigest()
