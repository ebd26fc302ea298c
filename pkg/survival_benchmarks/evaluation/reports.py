# This software may be modified and distributed under the terms of the
# LGPL-2.1+ license. See the accompanying LICENSE file for details.

import os

import yaml

from survival_benchmarks.evaluation.metrics import MetricReport

DECISION_CURVE_COLUMNS = ["threshold", "net_benefit", "treat_all", "treat_none"]


def write_report(report: MetricReport, out_dir, extra=None):
    """metrics.yaml, decision_curve.csv and (when defined) calibration_curve.csv"""
    os.makedirs(out_dir, exist_ok=True)

    summary = report.summary()
    summary.update(extra or {})
    empty = report.decision_curve.loc[report.decision_curve["empty_selection"], "threshold"]
    summary["decision_curve_empty_thresholds"] = [float(t) for t in empty]
    with open(os.path.join(out_dir, "metrics.yaml"), "w") as f:
        yaml.safe_dump(summary, f, sort_keys=False)

    report.decision_curve[DECISION_CURVE_COLUMNS].to_csv(os.path.join(out_dir, "decision_curve.csv"),
                                                         index=False, float_format="%.10g")
    if report.calibration is not None:
        report.calibration.curve[["predicted", "observed"]].to_csv(os.path.join(out_dir, "calibration_curve.csv"),
                                                                   index=False, float_format="%.10g")
