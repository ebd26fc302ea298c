# This software may be modified and distributed under the terms of the
# LGPL-2.1+ license. See the accompanying LICENSE file for details.

"""Cox proportional hazards benchmark with Breslow ties

The model is fitted on a centred design, so the baseline cumulative hazard H0 is the
one of the average patient and

    risk(x, H) = 1 - exp(-H0(H) * exp((x - mean) . beta))
"""

import dataclasses
import logging
import os
from typing import List

import numpy as np
import pandas as pd
import scipy.linalg
import yaml

from survival_benchmarks.base.config import ConfigMixin, load_yaml, package_cfg
from survival_benchmarks.base.errors import ConfigError, DataError, NumericalError

logger = logging.getLogger(__name__)

MAGGIC_EHR_CFG = package_cfg(__file__, "maggic_ehr.yaml")
SYNTHETIC_CFG = package_cfg(__file__, "synthetic.yaml")

COVARIATE_TYPES = ("binary", "continuous", "categorical")
OUTCOME_COLUMNS = ("time", "event")


# --------------------------------------------------------------------------- #
# Covariates and design
# --------------------------------------------------------------------------- #

@dataclasses.dataclass
class CovariateSpec(ConfigMixin):
    """Ordered covariates and declared interactions

    covariates: list of {name, type[, reference]} mappings, type one of binary,
    continuous, categorical (categorical needs its reference level).
    interactions: list of "a:b" strings.
    """
    covariates: List[dict] = dataclasses.field(default_factory=list)
    interactions: List[str] = dataclasses.field(default_factory=list)

    def validate(self):
        names = []
        for c in self.covariates:
            if not isinstance(c, dict) or "name" not in c or "type" not in c:
                raise ConfigError("covariate entries need a name and a type: {!r}".format(c))
            if c["type"] not in COVARIATE_TYPES:
                raise ConfigError("unknown covariate type {} for {}".format(c["type"], c["name"]))
            if c["type"] == "categorical" and "reference" not in c:
                raise ConfigError("categorical covariate {} needs a reference level".format(c["name"]))
            names.append(c["name"])
        if len(set(names)) != len(names):
            raise ConfigError("covariate names must be unique")
        for term in self.interactions:
            parts = term.split(":")
            if len(parts) != 2 or any(p not in names for p in parts):
                raise ConfigError("interaction {} must pair two declared covariates".format(term))

    @property
    def names(self):
        return [c["name"] for c in self.covariates]

    def covariate(self, name):
        return next(c for c in self.covariates if c["name"] == name)


def infer_spec(frame):
    """Spec treating every non-outcome column as binary (values in {0, 1}) or continuous"""
    covariates = []
    for name in frame.columns:
        if name in OUTCOME_COLUMNS:
            continue
        values = frame[name].dropna().unique()
        kind = "binary" if set(np.asarray(values).tolist()) <= {0, 1} else "continuous"
        covariates.append({"name": name, "type": kind})
    return CovariateSpec.from_dict({"covariates": covariates})


def _expand_covariate(frame, covariate):
    name = covariate["name"]
    if name not in frame.columns:
        raise DataError("design lacks covariate {}".format(name))
    column = frame[name]

    if covariate["type"] == "categorical":
        reference = str(covariate["reference"])
        values = column.astype(str)
        levels = sorted(set(values) - {reference})
        return {"{}[{}]".format(name, level): (values == level).astype(np.float64).to_numpy() for level in levels}

    values = pd.to_numeric(column, errors="coerce").to_numpy(dtype=np.float64)
    if np.any(~np.isfinite(values)):
        raise DataError("non-numeric value in covariate {}".format(name))
    if covariate["type"] == "binary" and not np.all(np.isin(values, (0.0, 1.0))):
        raise DataError("binary covariate {} takes values other than 0 and 1".format(name))
    return {name: values}


def expand_design(frame, spec: CovariateSpec, columns=None):
    """Numeric design: categorical dummies against the reference level, then interactions

    Parameters
    ----------
    frame : pandas.DataFrame
        Raw covariates (outcome columns are ignored).
    spec : CovariateSpec
    columns : list of str or None
        Expanded column order to reproduce (e.g. the one a model was fitted with);
        dummy columns of levels absent from `frame` are zero.

    Returns
    -------
    pandas.DataFrame
    """
    expanded = {}
    blocks = {}
    for covariate in spec.covariates:
        block = _expand_covariate(frame, covariate)
        blocks[covariate["name"]] = block
        expanded.update(block)

    for term in spec.interactions:
        a, b = term.split(":")
        for name_a, values_a in blocks[a].items():
            for name_b, values_b in blocks[b].items():
                expanded["{}:{}".format(name_a, name_b)] = values_a * values_b

    design = pd.DataFrame(expanded, index=frame.index)
    if columns is not None:
        design = design.reindex(columns=list(columns), fill_value=0.0)
    return design


def read_design(path):
    """Design CSV: header of covariate names plus `time,event`; optional `patient_id` index"""
    try:
        frame = pd.read_csv(path)
    except FileNotFoundError:
        raise DataError("Cannot open design file {}".format(path))
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise DataError("Malformed design file {}: {}".format(path, e))

    if "patient_id" in frame.columns:
        frame = frame.set_index(frame["patient_id"].astype(str)).drop(columns="patient_id")
    for name in OUTCOME_COLUMNS:
        if name not in frame.columns:
            raise DataError("design file {} lacks a {} column".format(path, name))
    if frame.isnull().values.any():
        line = int(np.flatnonzero(frame.isnull().values.any(axis=1))[0]) + 2
        raise DataError("missing value at line {}".format(line))
    if not np.all(np.isin(frame["event"], (0, 1))):
        raise DataError("invalid event column in {}".format(path))
    if np.any(frame["time"] < 0):
        raise DataError("negative time in {}".format(path))
    return frame


def write_design(frame, path):
    frame.to_csv(path, index=True, index_label="patient_id", float_format="%.17g")


# --------------------------------------------------------------------------- #
# Fit
# --------------------------------------------------------------------------- #

@dataclasses.dataclass
class CphModel:
    columns: list
    beta: np.ndarray
    means: np.ndarray
    baseline_times: np.ndarray
    baseline_cum_hazard: np.ndarray
    standard_errors: np.ndarray = None
    log_likelihood: float = float("nan")
    n_iter: int = 0
    trace: list = dataclasses.field(default_factory=list)
    spec: dict = None

    def cum_hazard0(self, t):
        """Baseline (centred) cumulative hazard, a right-continuous step function"""
        t = np.asarray(t, dtype=np.float64)
        k = np.searchsorted(self.baseline_times, t, side="right")
        padded = np.concatenate([[0.0], self.baseline_cum_hazard])
        return padded[k]

    def linear_predictor(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != len(self.beta):
            raise DataError("design has {} columns, model expects {}".format(x.shape[1], len(self.beta)))
        return (x - self.means) @ self.beta


class _RiskSets(object):
    """Reverse cumulative sums over time-sorted subjects, tie groups sharing their risk set"""

    def __init__(self, time, event):
        self.order = np.argsort(time, kind="stable")
        self.time = time[self.order]
        self.event = event[self.order].astype(bool)
        # index of the first subject of each subject's tie group
        first = np.searchsorted(self.time, self.time, side="left")
        self.group_start = first

    def reverse_cumsum(self, values):
        return np.flip(np.cumsum(np.flip(values, axis=0), axis=0), axis=0)[self.group_start]


def _partial_likelihood(x, risk_sets, beta, derivatives=True):
    eta = x @ beta
    shift = eta.max() if len(eta) else 0.0
    w = np.exp(eta - shift)

    s0 = risk_sets.reverse_cumsum(w)
    ev = risk_sets.event
    loglik = float(np.sum(eta[ev] - np.log(s0[ev]) - shift))
    if not derivatives:
        return loglik

    s1 = risk_sets.reverse_cumsum(w[:, None] * x)
    s2 = risk_sets.reverse_cumsum(w[:, None, None] * x[:, :, None] * x[:, None, :])

    mean_x = s1[ev] / s0[ev, None]
    score = np.sum(x[ev] - mean_x, axis=0)
    info = np.sum(s2[ev] / s0[ev, None, None] - mean_x[:, :, None] * mean_x[:, None, :], axis=0)
    return loglik, score, info


def partial_log_likelihood(x, time, event, beta):
    """Breslow log partial likelihood of `beta` (x is used as given, not centred)"""
    x = np.asarray(x, dtype=np.float64).reshape(len(time), -1)
    risk_sets = _RiskSets(np.asarray(time, dtype=np.float64), np.asarray(event))
    return _partial_likelihood(x[risk_sets.order], risk_sets, np.asarray(beta, dtype=np.float64),
                               derivatives=False)


def _check_design(x, columns):
    zero_var = [columns[j] for j in range(x.shape[1]) if np.ptp(x[:, j]) == 0.0]
    if zero_var:
        raise NumericalError("singular design: constant column(s) {}".format(", ".join(zero_var)))
    if x.shape[1] == 0:
        return

    _, r, pivot = scipy.linalg.qr(x, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    rank = int(np.sum(diag > diag[0] * max(x.shape) * np.finfo(np.float64).eps))
    if rank < x.shape[1]:
        dependent = [columns[j] for j in pivot[rank:]]
        raise NumericalError("singular design: collinear column(s) {}".format(", ".join(dependent)))


def cph_fit(x, time, event, columns=None, max_iter=100, tol=1e-8):
    """Maximise the Breslow partial likelihood by Newton-Raphson with step halving

    Parameters
    ----------
    x : array-like (n, p) or pandas.DataFrame
        Design matrix, no missing values; p may be 0.
    time, event : array-like (n,)
    columns : list of str or None
        Column names, taken from the frame when `x` is one.
    max_iter : int
    tol : float
        Convergence when the largest absolute score component is below `tol`.

    Returns
    -------
    CphModel
    """
    if isinstance(x, pd.DataFrame):
        columns = list(x.columns) if columns is None else columns
        x = x.to_numpy(dtype=np.float64)
    time = np.asarray(time, dtype=np.float64)
    event = np.asarray(event).astype(np.int64)
    x = np.asarray(x, dtype=np.float64).reshape(len(time), -1)
    n, p = x.shape
    columns = ["x{}".format(j) for j in range(p)] if columns is None else list(columns)

    if n <= p:
        raise DataError("need more patients ({}) than covariates ({})".format(n, p))
    if not np.all(np.isfinite(x)) or not np.all(np.isfinite(time)):
        raise DataError("design contains missing or non-finite values")
    if event.sum() == 0:
        raise DataError("no events")

    means = x.mean(axis=0)
    xc = x - means
    _check_design(xc, columns)

    risk_sets = _RiskSets(time, event)
    xs = xc[risk_sets.order]

    beta = np.zeros(p)
    loglik, score, info = _partial_likelihood(xs, risk_sets, beta)
    trace = [{"iteration": 0, "log_likelihood": loglik, "max_score": float(np.max(np.abs(score), initial=0.0))}]

    n_iter = 0
    while np.max(np.abs(score), initial=0.0) >= tol:
        if n_iter >= max_iter:
            raise NumericalError("Cox fit did not converge in {} iterations: {}".format(
                max_iter, ["{log_likelihood:.6f}/{max_score:.2e}".format(**row) for row in trace]))
        try:
            step = scipy.linalg.solve(info, score, assume_a="pos")
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
            raise NumericalError("singular information matrix over columns {}".format(", ".join(columns)))

        for _ in range(30):
            candidate = beta + step
            new_loglik = _partial_likelihood(xs, risk_sets, candidate, derivatives=False)
            if np.isfinite(new_loglik) and new_loglik >= loglik - 1e-12 * abs(loglik):
                break
            step = step / 2.0
        else:
            raise NumericalError("step halving failed to improve the partial likelihood at iteration {}".format(
                n_iter + 1))
        beta = candidate
        loglik, score, info = _partial_likelihood(xs, risk_sets, beta)
        n_iter += 1
        trace.append({"iteration": n_iter, "log_likelihood": loglik,
                      "max_score": float(np.max(np.abs(score)))})

    if not np.all(np.isfinite(beta)):
        raise NumericalError("non-finite Cox coefficients")

    try:
        standard_errors = np.sqrt(np.diag(scipy.linalg.inv(info))) if p else np.zeros(0)
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
        raise NumericalError("singular information matrix over columns {}".format(", ".join(columns)))

    times, cum_hazard = _breslow_baseline(xs, risk_sets, beta)
    logger.info("Cox fit converged in %d iterations, log partial likelihood %.6f", n_iter, loglik)

    return CphModel(columns=columns,
                    beta=beta,
                    means=means,
                    baseline_times=times,
                    baseline_cum_hazard=cum_hazard,
                    standard_errors=standard_errors,
                    log_likelihood=loglik,
                    n_iter=n_iter,
                    trace=trace)


def _breslow_baseline(xs, risk_sets, beta):
    """Breslow H0 on the distinct event times: sum of d_k / sum_{risk set} exp(x beta)"""
    s0 = risk_sets.reverse_cumsum(np.exp(xs @ beta))
    ev = risk_sets.event
    times, first = np.unique(risk_sets.time[ev], return_index=True)
    deaths = np.bincount(np.searchsorted(times, risk_sets.time[ev]), minlength=len(times))
    increments = deaths / s0[ev][first]
    return times, np.cumsum(increments)


def cph_predict(model: CphModel, x, horizon):
    """Risk by `horizon` for one covariate row (scalar out) or a matrix of rows"""
    single = np.ndim(x) == 1
    if isinstance(x, pd.DataFrame):
        x = x.to_numpy(dtype=np.float64)
    risk = -np.expm1(-model.cum_hazard0(horizon) * np.exp(model.linear_predictor(x)))
    return float(risk[0]) if single else risk


def fit_design(frame, spec: CovariateSpec = None, **kwargs):
    """Expand a raw design table under `spec` and fit; the spec is kept with the model"""
    spec = infer_spec(frame) if spec is None else spec
    design = expand_design(frame, spec)
    model = cph_fit(design, frame["time"], frame["event"], **kwargs)
    model.spec = spec.to_dict()
    return model


def predict_design(model: CphModel, frame, horizon):
    spec = CovariateSpec.from_dict(model.spec) if model.spec else infer_spec(frame)
    design = expand_design(frame, spec, columns=model.columns)
    return cph_predict(model, design.to_numpy(dtype=np.float64), horizon)


# --------------------------------------------------------------------------- #
# Serialization
# --------------------------------------------------------------------------- #

def save_cph_model(model: CphModel, path):
    out = {"columns": list(model.columns),
           "beta": [float(b) for b in model.beta],
           "standard_errors": [float(s) for s in model.standard_errors],
           "means": [float(m) for m in model.means],
           "baseline": {"times": [float(t) for t in model.baseline_times],
                        "cum_hazard": [float(h) for h in model.baseline_cum_hazard]},
           "log_likelihood": float(model.log_likelihood),
           "n_iter": int(model.n_iter),
           "spec": model.spec}
    with open(path, "w") as f:
        yaml.safe_dump(out, f, sort_keys=False)


def load_cph_model(path):
    if not os.path.isfile(path):
        raise DataError("Cannot open model file {}".format(path))
    try:
        raw = load_yaml(path)
        return CphModel(columns=list(raw["columns"]),
                        beta=np.asarray(raw["beta"], dtype=np.float64),
                        means=np.asarray(raw["means"], dtype=np.float64),
                        baseline_times=np.asarray(raw["baseline"]["times"], dtype=np.float64),
                        baseline_cum_hazard=np.asarray(raw["baseline"]["cum_hazard"], dtype=np.float64),
                        standard_errors=np.asarray(raw.get("standard_errors", []), dtype=np.float64),
                        log_likelihood=raw.get("log_likelihood", float("nan")),
                        n_iter=raw.get("n_iter", 0),
                        spec=raw.get("spec"))
    except (KeyError, TypeError, ValueError, ConfigError) as e:
        raise DataError("Malformed model file {}: {}".format(path, e))
