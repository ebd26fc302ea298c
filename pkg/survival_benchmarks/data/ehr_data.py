# This software may be modified and distributed under the terms of the
# LGPL-2.1+ license. See the accompanying LICENSE file for details.

"""Patient records, the code vocabulary, the cohort file format and the tokenizer.

A tokenized patient is a stream of encounter codes where every visit is closed by a
SEP token and the history is closed by a PRED token carrying the age at baseline and
the visit number that follows the last clinical visit:

    codes   D3   SEP  M1   D7   SEP  PRED
    ages    216  216  230  230  230  403
    visits  1    1    2    2    2    3
"""

import dataclasses
import fractions
import hashlib
import logging
from typing import List, Optional, Tuple

import numpy as np
import torch

from survival_benchmarks.base.errors import DataError

logger = logging.getLogger(__name__)

PAD, SEP, PRED, UNK = "PAD", "SEP", "PRED", "UNK"
RESERVED_TOKENS = (PAD, SEP, PRED, UNK)
PAD_ID, SEP_ID, PRED_ID, UNK_ID = 0, 1, 2, 3

MODALITIES = {"D": "diagnosis", "M": "medication", "P": "procedure"}
SEXES = ("male", "female")

DEFAULT_HORIZON_MONTHS = 48


@dataclasses.dataclass(frozen=True)
class EncounterRecord:
    code: str
    age_months: int
    visit_index: int

    def __post_init__(self):
        if not self.code or self.code[0] not in MODALITIES:
            raise DataError("code must start with D, M or P: {!r}".format(self.code))
        if any(c in self.code for c in ":;\t\n "):
            raise DataError("code contains a reserved separator: {!r}".format(self.code))
        if self.age_months < 0:
            raise DataError("age_months must be non-negative: {}".format(self.age_months))
        if self.visit_index < 1:
            raise DataError("visit_index must be >= 1: {}".format(self.visit_index))

    @property
    def modality(self):
        return MODALITIES[self.code[0]]


@dataclasses.dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    sex: str
    encounters: Tuple[EncounterRecord, ...]
    baseline_age_months: int
    event_time_months: float
    event_indicator: int

    def __post_init__(self):
        object.__setattr__(self, "encounters", tuple(self.encounters))

        if not self.patient_id or any(c in self.patient_id for c in "\t\n"):
            raise DataError("invalid patient_id {!r}".format(self.patient_id))
        if self.sex not in SEXES:
            raise DataError("sex must be male or female: {!r}".format(self.sex))
        if self.event_indicator not in (0, 1):
            raise DataError("event_indicator must be 0 or 1: {!r}".format(self.event_indicator))
        if not np.isfinite(self.event_time_months) or self.event_time_months < 0:
            raise DataError("event_time_months must be non-negative: {}".format(self.event_time_months))

        visits = [e.visit_index for e in self.encounters]
        if visits != sorted(visits):
            raise DataError("encounters of {} are not sorted by visit".format(self.patient_id))
        for e in self.encounters:
            if e.age_months > self.baseline_age_months:
                raise DataError("encounter {} of {} is recorded after baseline".format(e.code, self.patient_id))

    @property
    def n_visits(self):
        return len({e.visit_index for e in self.encounters})

    def codes(self):
        """Distinct codes of the record"""
        return {e.code for e in self.encounters}


def administrative_censor(cohort, horizon=DEFAULT_HORIZON_MONTHS):
    """Truncate follow-up at `horizon` months: later events become censored at the horizon"""
    out = []
    for p in cohort:
        if p.event_time_months > horizon:
            p = dataclasses.replace(p, event_time_months=float(horizon), event_indicator=0)
        out.append(p)
    return out


# --------------------------------------------------------------------------- #
# Vocabulary
# --------------------------------------------------------------------------- #

class Vocabulary(object):
    """Bijection between code strings (plus the reserved tokens) and dense ids"""

    def __init__(self, codes):
        codes = list(codes)
        if len(set(codes)) != len(codes):
            raise DataError("duplicate codes in vocabulary")
        for code in codes:
            if code in RESERVED_TOKENS:
                raise DataError("code {} collides with a reserved token".format(code))

        self._id_to_token = list(RESERVED_TOKENS) + codes
        self._token_to_id = {t: i for i, t in enumerate(self._id_to_token)}

    def __len__(self):
        return len(self._id_to_token)

    def __contains__(self, token):
        return token in self._token_to_id

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self._id_to_token == other._id_to_token

    @property
    def token_to_id(self):
        return dict(self._token_to_id)

    @property
    def codes(self):
        return self._id_to_token[len(RESERVED_TOKENS):]

    def id(self, token):
        return self._token_to_id.get(token, UNK_ID)

    def token(self, idx):
        return self._id_to_token[idx]

    @property
    def modality_counts(self):
        counts = {name: 0 for name in MODALITIES.values()}
        for code in self.codes:
            counts[MODALITIES[code[0]]] += 1
        return counts

    def to_text(self):
        return "".join("{}\t{}\n".format(t, i) for i, t in enumerate(self._id_to_token))

    def digest(self):
        """SHA-256 of the canonical vocabulary file"""
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()


def meets_prevalence(count, n, fraction):
    """count / n >= fraction, exact for decimal fractions such as 0.07"""
    return fractions.Fraction(count, n) >= fractions.Fraction(repr(float(fraction)))


def build_vocabulary(cohort, min_prevalence=0.0):
    """Vocabulary of the codes present in at least `min_prevalence` of the patients

    Parameters
    ----------
    cohort : list of PatientRecord
    min_prevalence : float
        Fraction in [0, 1) of patients a code must appear in.

    Returns
    -------
    Vocabulary
        Reserved tokens first, then the retained codes in lexicographic order.
    """
    if len(cohort) == 0:
        raise DataError("empty cohort")
    if not 0.0 <= min_prevalence < 1.0:
        raise DataError("min_prevalence must lie in [0, 1): {}".format(min_prevalence))

    counts = {}
    for p in cohort:
        for code in p.codes():
            counts[code] = counts.get(code, 0) + 1

    n = len(cohort)
    kept = sorted(code for code, c in counts.items() if meets_prevalence(c, n, min_prevalence))
    vocab = Vocabulary(kept)

    logger.debug("vocabulary of %d codes from %d distinct (min_prevalence=%s)",
                 len(kept), len(counts), min_prevalence)
    return vocab


def write_vocabulary(vocab, path):
    with open(path, "w", encoding="utf-8") as f:
        f.write(vocab.to_text())


def read_vocabulary(path):
    tokens = []
    try:
        with open(path, encoding="utf-8") as f:
            for n, line in enumerate(f, start=1):
                fields = line.rstrip("\n").split("\t")
                if len(fields) != 2:
                    raise DataError("malformed vocabulary line {}".format(n))
                token, idx = fields
                if not idx.isdigit() or int(idx) != n - 1:
                    raise DataError("invalid id at line {}".format(n))
                tokens.append(token)
    except FileNotFoundError:
        raise DataError("Cannot open vocabulary file {}".format(path))

    if tuple(tokens[:len(RESERVED_TOKENS)]) != RESERVED_TOKENS:
        raise DataError("vocabulary file {} must start with the reserved tokens".format(path))
    return Vocabulary(tokens[len(RESERVED_TOKENS):])


def remap_vocabulary(source, target):
    """Ids of `source` translated onto `target`; tokens missing from `target` map to UNK

    Returns
    -------
    numpy.ndarray
        Array of length len(source) with the target id of each source id.
    """
    return np.array([target.id(source.token(i)) for i in range(len(source))], dtype=np.int64)


# --------------------------------------------------------------------------- #
# Tokenizer
# --------------------------------------------------------------------------- #

@dataclasses.dataclass(frozen=True)
class TokenizedSequence:
    token_ids: np.ndarray
    ages_months: np.ndarray
    visit_positions: np.ndarray
    codes: Tuple[str, ...] = ()

    def __len__(self):
        return len(self.token_ids)

    def __eq__(self, other):
        return (isinstance(other, TokenizedSequence)
                and np.array_equal(self.token_ids, other.token_ids)
                and np.array_equal(self.ages_months, other.ages_months)
                and np.array_equal(self.visit_positions, other.visit_positions)
                and self.codes == other.codes)

    def with_pred_age(self, age_months):
        """Copy with a different age on the PRED token"""
        ages = self.ages_months.copy()
        ages[-1] = age_months
        return dataclasses.replace(self, ages_months=ages)


def _raw_stream(patient, vocab):
    ids, ages, visits, codes = [], [], [], []

    encounters = patient.encounters
    for k, e in enumerate(encounters):
        ids.append(vocab.id(e.code))
        ages.append(e.age_months)
        visits.append(e.visit_index)
        codes.append(e.code)

        last_of_visit = k + 1 == len(encounters) or encounters[k + 1].visit_index != e.visit_index
        if last_of_visit:
            ids.append(SEP_ID)
            ages.append(e.age_months)
            visits.append(e.visit_index)
            codes.append(SEP)

    return ids, ages, visits, codes


def tokenize(patient, vocab, max_len=512):
    """Token, age and visit streams of a patient's history, closed by PRED

    Histories longer than `max_len` keep their most recent `max_len - 1` tokens
    (SEP tokens count towards the limit) followed by PRED.
    """
    if max_len < 2:
        raise DataError("max_len must be >= 2")

    ids, ages, visits, codes = _raw_stream(patient, vocab)

    last_visit = patient.encounters[-1].visit_index if patient.encounters else 0
    keep = max_len - 1
    if len(ids) > keep:
        ids, ages, visits, codes = ids[-keep:], ages[-keep:], visits[-keep:], codes[-keep:]

    ids.append(PRED_ID)
    ages.append(patient.baseline_age_months)
    visits.append(last_visit + 1)
    codes.append(PRED)

    return TokenizedSequence(token_ids=np.asarray(ids, dtype=np.int64),
                             ages_months=np.asarray(ages, dtype=np.int64),
                             visit_positions=np.asarray(visits, dtype=np.int64),
                             codes=tuple(codes))


def collate(sequences, pad_to=None):
    """Right-padded batch tensors

    Returns
    -------
    dict
        token_ids, ages, visits: LongTensor (B, L); mask: BoolTensor (B, L), True on real
        tokens; pred_index: LongTensor (B,), position of each PRED token.
    """
    lengths = [len(s) for s in sequences]
    width = max(lengths) if pad_to is None else pad_to
    if width < max(lengths):
        raise DataError("pad_to shorter than the longest sequence")

    batch = len(sequences)
    token_ids = torch.full((batch, width), PAD_ID, dtype=torch.long)
    ages = torch.zeros((batch, width), dtype=torch.long)
    visits = torch.zeros((batch, width), dtype=torch.long)
    mask = torch.zeros((batch, width), dtype=torch.bool)

    for b, s in enumerate(sequences):
        n = len(s)
        token_ids[b, :n] = torch.from_numpy(s.token_ids)
        ages[b, :n] = torch.from_numpy(s.ages_months)
        visits[b, :n] = torch.from_numpy(s.visit_positions)
        mask[b, :n] = True

    return {"token_ids": token_ids,
            "ages": ages,
            "visits": visits,
            "mask": mask,
            "pred_index": torch.tensor([n - 1 for n in lengths], dtype=torch.long)}


# --------------------------------------------------------------------------- #
# Cohort file
# --------------------------------------------------------------------------- #

def _format_encounters(encounters):
    return ";".join("{}:{}:{}".format(e.visit_index, e.code, e.age_months) for e in encounters)


def format_patient(p):
    return "\t".join([p.patient_id,
                      p.sex,
                      str(p.baseline_age_months),
                      repr(float(p.event_time_months)),
                      str(p.event_indicator),
                      _format_encounters(p.encounters)])


def _parse_int(value, field, line_no):
    try:
        if not value.lstrip("-").isdigit():
            raise ValueError
        return int(value)
    except ValueError:
        raise DataError("invalid {} at line {}".format(field, line_no))


def parse_patient(line, line_no):
    fields = line.rstrip("\n").split("\t")
    if len(fields) != 6:
        raise DataError("expected 6 fields at line {}, found {}".format(line_no, len(fields)))

    patient_id, sex, baseline, event_time, indicator, raw_encounters = fields

    if sex not in SEXES:
        raise DataError("invalid sex at line {}".format(line_no))
    baseline_age = _parse_int(baseline, "baseline_age_months", line_no)
    try:
        t = float(event_time)
    except ValueError:
        raise DataError("invalid event_time_months at line {}".format(line_no))
    if not np.isfinite(t) or t < 0:
        raise DataError("invalid event_time_months at line {}".format(line_no))
    if indicator not in ("0", "1"):
        raise DataError("invalid event_indicator at line {}".format(line_no))

    encounters = []
    if raw_encounters:
        for item in raw_encounters.split(";"):
            parts = item.split(":")
            if len(parts) != 3:
                raise DataError("invalid encounters at line {}".format(line_no))
            visit = _parse_int(parts[0], "visit_index", line_no)
            age = _parse_int(parts[2], "age_months", line_no)
            try:
                encounters.append(EncounterRecord(code=parts[1], age_months=age, visit_index=visit))
            except DataError as e:
                raise DataError("invalid encounters at line {}: {}".format(line_no, e))

    try:
        return PatientRecord(patient_id=patient_id,
                             sex=sex,
                             encounters=tuple(encounters),
                             baseline_age_months=baseline_age,
                             event_time_months=t,
                             event_indicator=int(indicator))
    except DataError as e:
        raise DataError("invalid record at line {}: {}".format(line_no, e))


def read_cohort(path) -> List[PatientRecord]:
    """Parse a cohort file, one patient per line

    `patient_id \\t sex \\t baseline_age_months \\t event_time_months \\t event_indicator
    \\t visit_index:code:age_months;...`
    """
    cohort = []
    try:
        with open(path, encoding="utf-8") as f:
            for line_no, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                cohort.append(parse_patient(line, line_no))
    except FileNotFoundError:
        raise DataError("Cannot open cohort file {}".format(path))

    logger.debug("read %d patients from %s", len(cohort), path)
    return cohort


def write_cohort(cohort, path):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for p in cohort:
            f.write(format_patient(p) + "\n")


def cohort_outcomes(cohort):
    """(event_time, event_indicator) arrays of a cohort"""
    times = np.array([p.event_time_months for p in cohort], dtype=np.float64)
    events = np.array([p.event_indicator for p in cohort], dtype=np.int64)
    return times, events


def split_cohort(cohort, fraction, seed):
    """Random (train, held_out) split with `fraction` of the patients held out"""
    if not 0.0 < fraction < 1.0:
        raise DataError("split fraction must lie in (0, 1): {}".format(fraction))

    rng = np.random.Generator(np.random.PCG64(seed))
    order = rng.permutation(len(cohort))
    n_held = max(1, int(round(fraction * len(cohort))))
    held = set(order[:n_held].tolist())

    train = [p for i, p in enumerate(cohort) if i not in held]
    held_out = [p for i, p in enumerate(cohort) if i in held]
    return train, held_out


def shared_codes(cohort, vocab: Optional[Vocabulary]):
    """Clinical codes of `cohort` that `vocab` knows"""
    codes = set()
    for p in cohort:
        codes |= p.codes()
    return {c for c in codes if c in vocab}
