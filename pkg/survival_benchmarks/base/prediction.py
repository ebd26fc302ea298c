# This software may be modified and distributed under the terms of the
# LGPL-2.1+ license. See the accompanying LICENSE file for details.

import numpy as np
import pandas as pd

from survival_benchmarks.base.errors import DataError


class PredictionSet(object):
    """Horizon risks aligned with observed outcomes

    Attributes
    ----------
    patient_ids : list of str
    risk : (`numpy.ndarray` of float): predicted risk at `horizon`, each in [0, 1]
    event_time : (`numpy.ndarray` of float): observed time in months, event or censoring
    event_indicator : (`numpy.ndarray` of int): 1 = event observed, 0 = censored
    horizon : prediction horizon in months, in (0, 48]
    """

    def __init__(self,
                 risk,
                 event_time,
                 event_indicator,
                 horizon=36.0,
                 patient_ids=None):

        self._risk = np.asarray(risk, dtype=np.float64)
        self._event_time = np.asarray(event_time, dtype=np.float64)
        self._event_indicator = np.asarray(event_indicator, dtype=np.int64)

        self._check_valid_risk(self._risk)
        self._check_valid_outcomes(self._event_time, self._event_indicator)
        self._check_aligned()

        self.horizon = horizon

        if patient_ids is None:
            patient_ids = [str(i) for i in range(len(self._risk))]
        if len(patient_ids) != len(self._risk):
            raise DataError("patient_ids must be aligned with the risks")
        self.patient_ids = list(patient_ids)

    def __len__(self):
        return len(self._risk)

    @property
    def risk(self):
        return self._risk

    @risk.setter
    def risk(self, risk):
        risk = np.asarray(risk, dtype=np.float64)
        self._check_valid_risk(risk)
        if risk.shape != self._risk.shape:
            raise DataError("risk must keep its length {}".format(len(self._risk)))
        self._risk = risk

    @property
    def event_time(self):
        return self._event_time

    @property
    def event_indicator(self):
        return self._event_indicator

    @property
    def horizon(self):
        return self._horizon

    @horizon.setter
    def horizon(self, horizon):
        horizon = float(horizon)
        if not 0.0 < horizon <= 48.0:
            raise DataError("horizon must lie in (0, 48] months, got {}".format(horizon))
        self._horizon = horizon

    def subset(self, index):
        """New set holding the patients at `index` (booleans or positions)"""
        index = np.asarray(index)
        if index.dtype == bool:
            index = np.flatnonzero(index)
        return PredictionSet(self._risk[index], self._event_time[index],
                             self._event_indicator[index], self._horizon,
                             [self.patient_ids[i] for i in index])

    def _check_valid_risk(self, risk):
        """Checks that the risks are probabilities.
        """
        if risk.ndim != 1:
            raise DataError('risk must be specified as a 1-d array')

        if not np.all(np.isfinite(risk)) or np.any(risk < 0.0) or np.any(risk > 1.0):
            raise DataError('risk must lie in [0, 1]')

    def _check_valid_outcomes(self, event_time, event_indicator):
        """Checks that times are non-negative and indicators binary.
        """
        if event_time.ndim != 1 or event_indicator.ndim != 1:
            raise DataError('event_time and event_indicator must be 1-d arrays')

        if not np.all(np.isfinite(event_time)) or np.any(event_time < 0.0):
            raise DataError('event_time must be finite and non-negative')

        if not np.all(np.isin(event_indicator, (0, 1))):
            raise DataError('event_indicator must be 0 or 1')

    def _check_aligned(self):
        if not (len(self._risk) == len(self._event_time) == len(self._event_indicator)):
            raise DataError('risk, event_time and event_indicator must have equal lengths')


def write_predictions(preds: PredictionSet, path):
    """Write `patient_id \\t risk \\t event_time \\t event_indicator` rows"""
    frame = pd.DataFrame({"patient_id": preds.patient_ids,
                          "risk": preds.risk,
                          "event_time": preds.event_time,
                          "event_indicator": preds.event_indicator})
    frame.to_csv(path, sep="\t", header=False, index=False, float_format="%.17g")


def read_predictions(path, horizon=36.0):
    """Read a prediction file written by `write_predictions` (or by any other producer)"""
    try:
        frame = pd.read_csv(path, sep="\t", header=None,
                            names=["patient_id", "risk", "event_time", "event_indicator"],
                            dtype={"patient_id": str})
    except FileNotFoundError:
        raise DataError("Cannot open predictions file {}".format(path))
    except (pd.errors.ParserError, ValueError) as e:
        raise DataError("Malformed predictions file {}: {}".format(path, e))

    if frame.isnull().values.any():
        bad = int(np.flatnonzero(frame.isnull().values.any(axis=1))[0]) + 1
        raise DataError("missing field at line {}".format(bad))

    return PredictionSet(frame["risk"].to_numpy(dtype=np.float64),
                         frame["event_time"].to_numpy(dtype=np.float64),
                         frame["event_indicator"].to_numpy(dtype=np.int64),
                         horizon=horizon,
                         patient_ids=frame["patient_id"].tolist())
