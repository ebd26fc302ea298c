# This software may be modified and distributed under the terms of the
# LGPL-2.1+ license. See the accompanying LICENSE file for details.

"""Integrated-gradients attribution of the horizon risk to the encounters of a history

The path runs from the all-zero embedding to the patient's embedding (after the
token/age/position projection), so every position, SEP and PRED included, receives a
share of risk(x) - risk(zero embedding).
"""

import dataclasses
import logging
import os
import warnings
from typing import List

import numpy as np
import pandas as pd
import torch

from survival_benchmarks.base.config import ConfigMixin, package_cfg
from survival_benchmarks.base.errors import ConfigError, DataError, NumericalError
from survival_benchmarks.data.ehr_data import PRED, SEP, UNK_ID, collate, meets_prevalence, tokenize
from survival_benchmarks.transformer.soden_head import risk_at

logger = logging.getLogger(__name__)

DEFAULT_CFG = package_cfg(__file__, "explain.yaml")

ATTRIBUTION_COLUMNS = ["code", "stratum", "mean_contribution", "ci_low", "ci_high", "count"]


@dataclasses.dataclass
class AttributionConfig(ConfigMixin):
    ig_steps: int = 64
    horizon_months: float = 36.0
    prevalence_floor: float = 0.01
    age_bins_years: List[float] = dataclasses.field(default_factory=lambda: [0, 60, 70, 80, 200])
    time_to_baseline_bins_years: List[float] = dataclasses.field(default_factory=lambda: [0, 1, 5, 10, 200])
    top_k: int = 10
    batch_size: int = 32
    z_value: float = 1.96

    def validate(self):
        if self.ig_steps < 2:
            raise ConfigError("ig_steps must be >= 2")
        if not 0.0 <= self.prevalence_floor < 1.0:
            raise ConfigError("prevalence_floor must lie in [0, 1)")
        if not 0.0 < self.horizon_months <= 48.0:
            raise ConfigError("horizon_months must lie in (0, 48]")
        for name in ("age_bins_years", "time_to_baseline_bins_years"):
            edges = getattr(self, name)
            if len(edges) < 2 or list(edges) != sorted(edges):
                raise ConfigError("{} must be increasing edges".format(name))


def integrated_gradients(fn, inputs, steps=64, baseline=None, batch_size=32):
    """Midpoint-rule integrated gradients of a scalar function

    Parameters
    ----------
    fn : callable
        Maps a batch of inputs (k, *inputs.shape) to k scalars.
    inputs : torch.Tensor
    steps : int
        Number of points alpha = (k + 0.5) / steps on the straight path.
    baseline : torch.Tensor or None
        Path start, zeros by default.

    Returns
    -------
    torch.Tensor
        Elementwise attributions, shape of `inputs`.
    """
    inputs = inputs.detach()
    baseline = torch.zeros_like(inputs) if baseline is None else baseline.detach()
    delta = inputs - baseline
    alphas = (torch.arange(steps, dtype=inputs.dtype) + 0.5) / steps

    total = torch.zeros_like(inputs)
    for start in range(0, steps, batch_size):
        a = alphas[start:start + batch_size].view(-1, *([1] * inputs.dim()))
        path = (baseline.unsqueeze(0) + a * delta.unsqueeze(0)).requires_grad_(True)
        out = fn(path)
        grad, = torch.autograd.grad(out.sum(), path)
        total = total + grad.sum(dim=0)

    attributions = delta * total / steps
    if not torch.all(torch.isfinite(attributions)):
        raise NumericalError("non-finite gradient in integrated gradients")
    return attributions


@dataclasses.dataclass
class PatientAttribution:
    patient_id: str
    codes: tuple
    token_ids: np.ndarray
    ages_months: np.ndarray
    contributions: np.ndarray


def horizon_risk_fn(model, seq, horizon_months):
    """risk_at(horizon) as a function of a batch of embedded copies of `seq`"""
    def fn(embedded):
        batch = collate([seq] * embedded.shape[0])
        z = model.latent_from_embedding(embedded, batch)
        return risk_at(model.head.integrate(z), horizon_months)
    return fn


def ig_patient(seq, model, config: AttributionConfig, patient_id=""):
    """Per-token contributions to the horizon risk of one tokenized history

    Each token's scalar is the sum of its elementwise attributions over the embedding
    dimensions.
    """
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            embedded = model.embed(collate([seq]))[0]
        attributions = integrated_gradients(horizon_risk_fn(model, seq, config.horizon_months),
                                            embedded, steps=config.ig_steps, batch_size=config.batch_size)
    finally:
        model.train(was_training)

    return PatientAttribution(patient_id=patient_id,
                              codes=seq.codes,
                              token_ids=seq.token_ids,
                              ages_months=seq.ages_months,
                              contributions=attributions.sum(dim=-1).numpy())


def explain_cohort(model, cohort, vocab, config: AttributionConfig):
    attributions = []
    for n, patient in enumerate(cohort, start=1):
        seq = tokenize(patient, vocab, model.config.max_seq_len)
        attributions.append(ig_patient(seq, model, config, patient_id=patient.patient_id))
        if n % 100 == 0:
            logger.info("attributed %d / %d patients", n, len(cohort))
    return attributions


# --------------------------------------------------------------------------- #
# Aggregation
# --------------------------------------------------------------------------- #

@dataclasses.dataclass
class AttributionReport:
    n_patients: int
    table: pd.DataFrame
    special_tokens: pd.DataFrame
    top_k: pd.DataFrame
    omitted_strata: list


def _patient_code_scores(attribution: PatientAttribution):
    """Max contribution of every code over its occurrences; UNK positions are skipped"""
    scores, special = {}, {}
    for code, token_id, value in zip(attribution.codes, attribution.token_ids, attribution.contributions):
        if code in (SEP, PRED):
            target = special
        elif token_id == UNK_ID:
            continue
        else:
            target = scores
        target[code] = max(target.get(code, -np.inf), float(value))
    return scores, special


def _bin_label(prefix, value, edges):
    k = np.searchsorted(edges, value, side="right") - 1
    if k < 0 or k >= len(edges) - 1:
        return None
    return "{}=[{:g},{:g})".format(prefix, edges[k], edges[k + 1])


def _summarise(code, stratum, values, z_value):
    values = np.asarray(values, dtype=np.float64)
    mean = float(values.mean())
    if len(values) > 1:
        half = z_value * float(values.std(ddof=1)) / np.sqrt(len(values))
    else:
        half = float("nan")
    return {"code": code, "stratum": stratum, "mean_contribution": mean,
            "ci_low": mean - half, "ci_high": mean + half, "count": len(values)}


def aggregate(attributions, cohort, config: AttributionConfig):
    """Population contributions per code, overall and per stratum

    Parameters
    ----------
    attributions : list of PatientAttribution
    cohort : list of PatientRecord
        The attributed patients (matched by id).
    config : AttributionConfig

    Returns
    -------
    AttributionReport
    """
    if not attributions:
        raise DataError("no attributions to aggregate")
    records = {p.patient_id: p for p in cohort}

    per_code = {}
    special = {}
    for attribution in sorted(attributions, key=lambda a: a.patient_id):
        if attribution.patient_id not in records:
            raise DataError("no record for patient {}".format(attribution.patient_id))
        patient = records[attribution.patient_id]
        scores, special_scores = _patient_code_scores(attribution)

        for code, value in special_scores.items():
            special.setdefault(code, []).append(value)

        for code, value in scores.items():
            first_age = min(e.age_months for e in patient.encounters if e.code == code)
            strata = [
                "sex={}".format(patient.sex),
                _bin_label("age_first", first_age / 12.0, config.age_bins_years),
                _bin_label("years_to_baseline", (patient.baseline_age_months - first_age) / 12.0,
                           config.time_to_baseline_bins_years),
            ]
            per_code.setdefault(code, []).append((value, [s for s in strata if s is not None]))

    n = len(attributions)
    possible_strata = (["sex=male", "sex=female"]
                       + [_bin_label("age_first", lo, config.age_bins_years)
                          for lo in config.age_bins_years[:-1]]
                       + [_bin_label("years_to_baseline", lo, config.time_to_baseline_bins_years)
                          for lo in config.time_to_baseline_bins_years[:-1]])

    rows, omitted = [], []
    for code in sorted(per_code):
        entries = per_code[code]
        if not meets_prevalence(len(entries), n, config.prevalence_floor):
            continue
        rows.append(_summarise(code, "all", [v for v, _ in entries], config.z_value))
        for stratum in possible_strata:
            values = [v for v, strata in entries if stratum in strata]
            if values:
                rows.append(_summarise(code, stratum, values, config.z_value))
            else:
                omitted.append((code, stratum))

    if omitted:
        warnings.warn("aggregate(): {} empty (code, stratum) cells omitted".format(len(omitted)))

    table = pd.DataFrame(rows, columns=ATTRIBUTION_COLUMNS)
    special_table = pd.DataFrame([_summarise(code, "all", special[code], config.z_value) for code in sorted(special)],
                                 columns=ATTRIBUTION_COLUMNS)

    overall = table[table["stratum"] == "all"].sort_values(["mean_contribution", "code"], ascending=[False, True])
    top_k = overall.head(config.top_k).reset_index(drop=True)
    top_k.insert(0, "rank", np.arange(1, len(top_k) + 1))

    logger.info("aggregated %d codes over %d patients", int((table["stratum"] == "all").sum()), n)
    return AttributionReport(n_patients=n, table=table, special_tokens=special_table,
                             top_k=top_k, omitted_strata=omitted)


def write_attribution_report(report: AttributionReport, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    report.table.to_csv(os.path.join(out_dir, "attributions.csv"), index=False, float_format="%.10g")
    report.top_k.to_csv(os.path.join(out_dir, "top_k.csv"), index=False, float_format="%.10g")
    report.special_tokens.to_csv(os.path.join(out_dir, "special_tokens.csv"), index=False, float_format="%.10g")
