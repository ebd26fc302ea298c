# This software may be modified and distributed under the terms of the
# LGPL-2.1+ license. See the accompanying LICENSE file for details.

"""Censoring-aware metrics of horizon risk predictions"""

import dataclasses
import logging
import warnings

import numpy as np
import pandas as pd
from lifelines import KaplanMeierFitter
from sklearn.metrics import average_precision_score

from survival_benchmarks.base import transformations as tr
from survival_benchmarks.base.errors import DataError, NumericalError
from survival_benchmarks.base.prediction import PredictionSet
from survival_benchmarks.cox.baseline_cph import cph_fit, cph_predict

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = tuple(np.round(np.arange(0.01, 1.0, 0.01), 2))

_BLOCK = 512


# --------------------------------------------------------------------------- #
# Concordance
# --------------------------------------------------------------------------- #

def _pair_blocks(risk, time, event):
    """Yield (rows, comparable, concordant, tied) boolean blocks of the pair matrix

    Pair (i, j) is comparable when t_i < t_j and patient i had the event.
    """
    n = len(risk)
    for start in range(0, n, _BLOCK):
        rows = np.arange(start, min(start + _BLOCK, n))
        comparable = (time[rows, None] < time[None, :]) & (event[rows, None] == 1)
        concordant = comparable & (risk[rows, None] > risk[None, :])
        tied = comparable & (risk[rows, None] == risk[None, :])
        yield rows, comparable, concordant, tied


def concordance_counts(risk, time, event):
    """(concordant, tied, comparable) pair counts, as integers"""
    risk = np.asarray(risk, dtype=np.float64)
    time = np.asarray(time, dtype=np.float64)
    event = np.asarray(event, dtype=np.int64)
    concordant = tied = comparable = 0
    for _, comp, conc, tie in _pair_blocks(risk, time, event):
        comparable += int(comp.sum())
        concordant += int(conc.sum())
        tied += int(tie.sum())
    return concordant, tied, comparable


def concordance(risk, time, event):
    """Harrell's C: (concordant + 0.5 tied) / comparable"""
    concordant, tied, comparable = concordance_counts(risk, time, event)
    if comparable == 0:
        raise DataError("degenerate censoring: no comparable pairs")
    return (concordant + 0.5 * tied) / comparable


def _bootstrap_concordance(risk, time, event, n_bootstrap, seed):
    """Percentile replicates from patient-level resampling

    A resample drawing patient i w_i times weights pair (i, j) by w_i * w_j, so every
    replicate is w'Nw / w'Dw over the fixed pair matrices.
    """
    n = len(risk)
    rng = np.random.Generator(np.random.PCG64(seed))
    weights = rng.multinomial(n, np.full(n, 1.0 / n), size=n_bootstrap).astype(np.float64)

    numerator = np.zeros(n_bootstrap)
    denominator = np.zeros(n_bootstrap)
    for rows, comp, conc, tie in _pair_blocks(risk, time, event):
        score = conc + 0.5 * tie
        numerator += np.sum(weights[:, rows].T * (score @ weights.T), axis=0)
        denominator += np.sum(weights[:, rows].T * (comp.astype(np.float64) @ weights.T), axis=0)

    valid = denominator > 0
    return numerator[valid] / denominator[valid]


def c_index(preds: PredictionSet, n_bootstrap=1000, seed=0, alpha=0.05):
    """Harrell's C-index with a bootstrap percentile interval

    Returns
    -------
    (value, ci_low, ci_high)
    """
    if len(preds) < 2:
        raise DataError("c_index needs at least 2 patients")

    value = concordance(preds.risk, preds.event_time, preds.event_indicator)
    if n_bootstrap <= 0:
        return value, float("nan"), float("nan")

    replicates = _bootstrap_concordance(preds.risk, preds.event_time, preds.event_indicator, n_bootstrap, seed)
    low, high = np.percentile(replicates, [100 * alpha / 2, 100 * (1 - alpha / 2)])
    return value, float(low), float(high)


def oracle_c_index(true_hazard, preds: PredictionSet):
    """C-index of the true hazards against the observed outcomes: the attainable ceiling"""
    return concordance(true_hazard, preds.event_time, preds.event_indicator)


# --------------------------------------------------------------------------- #
# Classification at the horizon
# --------------------------------------------------------------------------- #

def classifiable_outcomes(preds: PredictionSet, horizon):
    """Patients with a known status at `horizon` and their labels

    Positives had the event by the horizon; negatives were followed up to the horizon
    without it. Patients censored before the horizon are excluded.

    Returns
    -------
    (keep, labels) : boolean mask over all patients, 0/1 labels of the kept ones
    """
    positive = (preds.event_indicator == 1) & (preds.event_time <= horizon)
    keep = positive | (preds.event_time >= horizon)
    return keep, positive[keep].astype(np.int64)


def auprc(preds: PredictionSet, horizon):
    """Step-wise area under the precision-recall curve over the classifiable set"""
    keep, labels = classifiable_outcomes(preds, horizon)
    if labels.sum() == 0 or labels.sum() == len(labels):
        raise DataError("auprc needs both positives and negatives at {} months".format(horizon))
    return float(average_precision_score(labels, preds.risk[keep]))


@dataclasses.dataclass
class ImpactCounts:
    threshold: float
    pp: int
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def ppv(self):
        return self.tp / self.pp if self.pp > 0 else float("nan")

    @property
    def sensitivity(self):
        events = self.tp + self.fn
        return self.tp / events if events > 0 else float("nan")

    def to_dict(self):
        out = dataclasses.asdict(self)
        out.update(ppv=self.ppv, sensitivity=self.sensitivity)
        return out


def impact_analysis(preds: PredictionSet, horizon, threshold=0.5):
    """Confusion counts at `threshold` over the same classifiable set as `auprc`"""
    keep, labels = classifiable_outcomes(preds, horizon)
    if not np.any(keep):
        raise DataError("empty classifiable set at {} months".format(horizon))

    flagged = preds.risk[keep] >= threshold
    positive = labels == 1
    return ImpactCounts(threshold=float(threshold),
                        pp=int(flagged.sum()),
                        tp=int((flagged & positive).sum()),
                        fp=int((flagged & ~positive).sum()),
                        fn=int((~flagged & positive).sum()),
                        tn=int((~flagged & ~positive).sum()))


# --------------------------------------------------------------------------- #
# Calibration
# --------------------------------------------------------------------------- #

@dataclasses.dataclass
class CalibrationSummary:
    ici: float
    e50: float
    e90: float
    curve: pd.DataFrame
    observed: np.ndarray


def calibration_curve_and_ici(preds: PredictionSet, horizon, n_grid=50):
    """Smoothed calibration curve and integrated calibration index

    A Cox model of the outcome (administratively censored at the horizon) on
    g = cloglog(risk) and a three-knot restricted cubic spline of g gives the observed
    risk of every patient; ICI is the mean absolute difference to the prediction.
    """
    if len(preds) < 50:
        raise DataError("calibration needs at least 50 patients")
    risk = preds.risk
    if np.any(risk <= 0.0) or np.any(risk >= 1.0):
        raise DataError("calibration needs risks strictly inside (0, 1)")

    time = np.minimum(preds.event_time, horizon)
    event = ((preds.event_indicator == 1) & (preds.event_time <= horizon)).astype(np.int64)

    g = tr.risk_to_cloglog(risk)
    try:
        knots = tr.rcs_knots(g)
    except ValueError:
        raise DataError("degenerate predictions: spline knots coincide")

    def design(values):
        return np.column_stack([values, tr.rcs_basis(values, knots)])

    try:
        model = cph_fit(design(g), time, event, columns=["cloglog", "cloglog_rcs"])
    except NumericalError as e:
        raise DataError("degenerate predictions: {}".format(e))

    observed = cph_predict(model, design(g), horizon)
    difference = np.abs(observed - risk)

    grid = np.linspace(np.quantile(risk, 0.01), np.quantile(risk, 0.99), n_grid)
    curve = pd.DataFrame({"predicted": grid,
                          "observed": cph_predict(model, design(tr.risk_to_cloglog(grid)), horizon)})

    return CalibrationSummary(ici=float(np.mean(difference)),
                              e50=float(np.median(difference)),
                              e90=float(np.quantile(difference, 0.9)),
                              curve=curve,
                              observed=observed)


# --------------------------------------------------------------------------- #
# Decision curve
# --------------------------------------------------------------------------- #

def kaplan_meier_risk(time, event, horizon):
    """1 - KM(horizon)"""
    kmf = KaplanMeierFitter()
    kmf.fit(np.asarray(time, dtype=np.float64), event_observed=np.asarray(event))
    return float(1.0 - kmf.survival_function_at_times(horizon).values[0])


def decision_curve(preds: PredictionSet, horizon, thresholds=DEFAULT_THRESHOLDS):
    """Net benefit of treating patients with risk >= p_t, censoring handled by Kaplan-Meier

    Returns
    -------
    pandas.DataFrame
        threshold, net_benefit, treat_all, treat_none, empty_selection
    """
    thresholds = np.asarray(thresholds, dtype=np.float64)
    if np.any(thresholds <= 0.0) or np.any(thresholds >= 1.0):
        raise DataError("thresholds must lie in (0, 1)")

    n = len(preds)
    event_rate_all = kaplan_meier_risk(preds.event_time, preds.event_indicator, horizon)

    rows = []
    for p_t in thresholds:
        odds = p_t / (1.0 - p_t)
        selected = preds.risk >= p_t
        n_selected = int(selected.sum())
        if n_selected == 0:
            net_benefit = 0.0
        else:
            event_rate = kaplan_meier_risk(preds.event_time[selected], preds.event_indicator[selected], horizon)
            tp = n_selected * event_rate
            fp = n_selected * (1.0 - event_rate)
            net_benefit = tp / n - fp / n * odds
        rows.append({"threshold": float(p_t),
                     "net_benefit": float(net_benefit),
                     "treat_all": float(event_rate_all - (1.0 - event_rate_all) * odds),
                     "treat_none": 0.0,
                     "empty_selection": n_selected == 0})

    curve = pd.DataFrame(rows)
    n_empty = int(curve["empty_selection"].sum())
    if n_empty:
        logger.debug("decision curve: %d thresholds select nobody", n_empty)
    return curve


# --------------------------------------------------------------------------- #
# Report
# --------------------------------------------------------------------------- #

@dataclasses.dataclass
class MetricReport:
    horizon: float
    n_patients: int
    n_events: int
    c_index: float
    c_index_ci: tuple
    auprc: float
    calibration: CalibrationSummary
    decision_curve: pd.DataFrame
    impact: ImpactCounts

    def summary(self):
        """Plain mapping of the scalar results"""
        return {"horizon_months": float(self.horizon),
                "n_patients": int(self.n_patients),
                "n_events": int(self.n_events),
                "c_index": {"value": float(self.c_index),
                            "ci_low": float(self.c_index_ci[0]),
                            "ci_high": float(self.c_index_ci[1])},
                "auprc": None if self.auprc is None else float(self.auprc),
                "calibration": None if self.calibration is None else {"ici": self.calibration.ici,
                                                                      "e50": self.calibration.e50,
                                                                      "e90": self.calibration.e90},
                "impact": {k: (float(v) if isinstance(v, float) else int(v))
                           for k, v in self.impact.to_dict().items()}}


def evaluate(preds: PredictionSet, horizon=None, thresholds=DEFAULT_THRESHOLDS, impact_threshold=0.5,
             n_bootstrap=1000, seed=0):
    """All metrics of one prediction set

    AUPRC and calibration may be undefined on small or degenerate sets; they are then
    reported as missing with a warning rather than failing the whole evaluation.
    """
    horizon = preds.horizon if horizon is None else horizon
    value, low, high = c_index(preds, n_bootstrap=n_bootstrap, seed=seed)

    try:
        pr = auprc(preds, horizon)
    except DataError as e:
        warnings.warn("evaluate(): AUPRC undefined, {}".format(e))
        pr = None
    try:
        calibration = calibration_curve_and_ici(preds, horizon)
    except DataError as e:
        warnings.warn("evaluate(): calibration undefined, {}".format(e))
        calibration = None

    report = MetricReport(horizon=horizon,
                          n_patients=len(preds),
                          n_events=int(preds.event_indicator.sum()),
                          c_index=value,
                          c_index_ci=(low, high),
                          auprc=pr,
                          calibration=calibration,
                          decision_curve=decision_curve(preds, horizon, thresholds),
                          impact=impact_analysis(preds, horizon, impact_threshold))
    logger.info("C-index %.4f (%.4f, %.4f), AUPRC %s, ICI %s at %g months", value, low, high,
                "n/a" if pr is None else "{:.4f}".format(pr),
                "n/a" if calibration is None else "{:.4f}".format(calibration.ici), horizon)
    return report
