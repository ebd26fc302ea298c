# This software may be modified and distributed under the terms of the
# LGPL-2.1+ license. See the accompanying LICENSE file for details.

"""Synthetic cohorts with known, code-conditioned exponential hazards.

Each patient's hazard is `baseline_hazard * exp(sum of the log-HRs of the risk codes
they carry)`, so every downstream estimate (C-index ceiling, calibration, Cox
coefficients, attributions) has a closed-form truth to be compared against.
"""

import dataclasses
import logging
import math
from typing import List

import numpy as np
import pandas as pd

from survival_benchmarks.base.config import ConfigMixin, package_cfg
from survival_benchmarks.base.errors import ConfigError, DataError
from survival_benchmarks.data.ehr_data import EncounterRecord, PatientRecord

logger = logging.getLogger(__name__)

DEFAULT_CFG = package_cfg(__file__, "synth.yaml")


@dataclasses.dataclass
class SynthConfig(ConfigMixin):
    n_patients: int = 2000
    seed: int = 7
    risk_codes: List[list] = dataclasses.field(
        default_factory=lambda: [["D_R1", 0.3, math.log(4.0)], ["M_R2", 0.3, math.log(2.0)]])
    baseline_hazard_per_month: float = 0.02
    mean_visits: float = 6.0
    censoring_hazard_per_month: float = 0.003
    horizon_months: float = 48.0
    repeat_rate: float = 0.5
    n_background_codes: int = 30
    background_prevalence: float = 0.15
    min_age_years: int = 40
    max_age_years: int = 90

    def validate(self):
        if self.n_patients < 1:
            raise ConfigError("n_patients must be positive")
        self.risk_codes = [[str(c), float(p), float(b)] for c, p, b in self.risk_codes]
        codes = [c for c, _, _ in self.risk_codes]
        if len(set(codes)) != len(codes):
            raise ConfigError("risk codes must be unique")
        for code, prevalence, _ in self.risk_codes:
            if not 0.0 < prevalence < 1.0:
                raise ConfigError("prevalence of {} must lie in (0, 1)".format(code))
            if code[0] not in "DMP":
                raise ConfigError("risk code {} must start with D, M or P".format(code))
        if self.baseline_hazard_per_month <= 0.0:
            raise ConfigError("baseline_hazard_per_month must be positive")
        if self.censoring_hazard_per_month < 0.0:
            raise ConfigError("censoring_hazard_per_month must be non-negative")
        if self.mean_visits <= 0.0 or self.horizon_months <= 0.0:
            raise ConfigError("mean_visits and horizon_months must be positive")
        if self.n_background_codes > 0 and not 0.0 < self.background_prevalence < 1.0:
            raise ConfigError("background_prevalence must lie in (0, 1)")
        if not 0 <= self.min_age_years <= self.max_age_years:
            raise ConfigError("invalid age range")

    @property
    def background_codes(self):
        modalities = "DMP"
        return ["{}_B{:03d}".format(modalities[k % 3], k) for k in range(self.n_background_codes)]


@dataclasses.dataclass(frozen=True)
class OracleRisk:
    patient_id: str
    true_hazard_per_month: float

    def survival_at(self, t):
        return math.exp(-self.true_hazard_per_month * t)

    def risk_at(self, t):
        return -math.expm1(-self.true_hazard_per_month * t)


def patient_rng(seed, index):
    """PCG64 substream of patient `index`, independent of how patients are scheduled"""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy=seed, spawn_key=(index,))))


def _generate_patient(config, index):
    rng = patient_rng(config.seed, index)

    sex = "male" if rng.random() < 0.5 else "female"
    baseline_age = int(rng.integers(config.min_age_years * 12, config.max_age_years * 12 + 1))

    log_hr = 0.0
    assigned = []
    for code, prevalence, beta in config.risk_codes:
        if rng.random() < prevalence:
            assigned.append(code)
            log_hr += beta

    background = config.background_codes
    for code in background:
        if rng.random() < config.background_prevalence:
            assigned.append(code)
    if not assigned and background:
        assigned.append(background[int(rng.integers(len(background)))])

    n_visits = max(1, int(rng.poisson(config.mean_visits)))

    occurrences = []
    for order, code in enumerate(assigned):
        repeats = 1 + int(rng.poisson(config.repeat_rate))
        for _ in range(repeats):
            occurrences.append((int(rng.integers(1, n_visits + 1)), order, code))
    occurrences.sort()

    # visits are renumbered over the non-empty ones; ages keep the monthly spacing
    renumber = {v: k + 1 for k, v in enumerate(sorted({v for v, _, _ in occurrences}))}
    encounters = tuple(EncounterRecord(code=code,
                                       age_months=baseline_age - (n_visits - v + 1),
                                       visit_index=renumber[v])
                       for v, _, code in occurrences)

    hazard = config.baseline_hazard_per_month * math.exp(log_hr)
    event_time = float(rng.exponential(1.0 / hazard))
    if config.censoring_hazard_per_month > 0.0:
        censor_time = float(rng.exponential(1.0 / config.censoring_hazard_per_month))
    else:
        censor_time = math.inf
    censor_time = min(censor_time, config.horizon_months)

    observed = event_time <= censor_time
    patient_id = "P{:06d}".format(index)
    record = PatientRecord(patient_id=patient_id,
                           sex=sex,
                           encounters=encounters,
                           baseline_age_months=baseline_age,
                           event_time_months=event_time if observed else censor_time,
                           event_indicator=1 if observed else 0)
    return record, OracleRisk(patient_id, hazard)


def generate(config: SynthConfig):
    """Cohort and per-patient true hazards, deterministic given `config.seed`

    Returns
    -------
    (list of PatientRecord, list of OracleRisk)
    """
    cohort, oracles = [], []
    for index in range(config.n_patients):
        record, oracle = _generate_patient(config, index)
        cohort.append(record)
        oracles.append(oracle)

    n_events = sum(p.event_indicator for p in cohort)
    logger.info("generated %d patients, %d events (%.1f%% censored)",
                len(cohort), n_events, 100.0 * (1.0 - n_events / len(cohort)))
    return cohort, oracles


def shifted(config: SynthConfig, baseline_hazard_factor=0.5, seed=None):
    """Domain-shift variant: same risk codes, scaled baseline hazard, its own seed"""
    return dataclasses.replace(config,
                               baseline_hazard_per_month=config.baseline_hazard_per_month * baseline_hazard_factor,
                               seed=config.seed + 1 if seed is None else seed)


def write_oracle(oracles, path):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for o in oracles:
            f.write("{}\t{!r}\n".format(o.patient_id, float(o.true_hazard_per_month)))


def read_oracle(path):
    oracles = []
    try:
        with open(path, encoding="utf-8") as f:
            for n, line in enumerate(f, start=1):
                fields = line.rstrip("\n").split("\t")
                if len(fields) != 2:
                    raise DataError("malformed oracle line {}".format(n))
                try:
                    hazard = float(fields[1])
                except ValueError:
                    raise DataError("invalid true_hazard at line {}".format(n))
                if not hazard > 0.0:
                    raise DataError("invalid true_hazard at line {}".format(n))
                oracles.append(OracleRisk(fields[0], hazard))
    except FileNotFoundError:
        raise DataError("Cannot open oracle file {}".format(path))
    return oracles


def code_column(code):
    return "code_{}".format(code)


def baseline_design(cohort, config: SynthConfig):
    """MAGGIC-EHR-style covariate table of a synthetic cohort

    Columns: age_years, male, one indicator per configured risk code, then time, event.
    """
    rows = []
    for p in cohort:
        codes = p.codes()
        row = {"age_years": p.baseline_age_months / 12.0,
               "male": 1 if p.sex == "male" else 0}
        for code, _, _ in config.risk_codes:
            row[code_column(code)] = 1 if code in codes else 0
        row["time"] = p.event_time_months
        row["event"] = p.event_indicator
        rows.append(row)

    frame = pd.DataFrame(rows)
    frame.index = [p.patient_id for p in cohort]
    frame.index.name = "patient_id"
    return frame
