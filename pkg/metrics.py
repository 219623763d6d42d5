"""`Metrics` module: Jaccard, F1, PRAUC, DDI rate, #Med and the bootstrap protocol.

Every metric is computed per visit, averaged within a patient, then averaged over
patients.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from errors import DataError

logger = logging.getLogger(__name__)

METRICS = ('jaccard', 'f1', 'prauc', 'ddi_rate', 'med_count')
REFERENCE_DDI = {'MIMIC-III': 0.0868, 'MIMIC-IV': 0.0724}
CONVENTIONS = {
    'jaccard_both_empty': 1.0,
    'ap_no_positive': 0.0,
    'ddi_fewer_than_two': 0.0,
    'bootstrap_unit': 'patient',
    'duplicates': 'counted with multiplicity',
}


@dataclass
class EvalReport:
    mean: dict
    std: dict
    rounds: int
    fraction: float
    seed: int
    patients: int
    visits: int
    cold_start: bool = False
    ground_truth_ddi: float = 0.0
    reference_ddi: dict = field(default_factory=lambda: dict(REFERENCE_DDI))
    conventions: dict = field(default_factory=lambda: dict(CONVENTIONS))
    config_digest: str = ''
    raw: list = field(default_factory=list, repr=False)


def visit_jaccard(truth, predicted):
    union = truth | predicted
    if not union:
        return CONVENTIONS['jaccard_both_empty']
    return len(truth & predicted) / len(union)


def visit_f1(truth, predicted):
    hits = len(truth & predicted)
    precision = hits / len(predicted) if predicted else 0.0
    recall = hits / len(truth) if truth else 0.0
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def average_precision(truth, probabilities):
    """
    Mean of precision at each positive's rank; equal scores rank the lower index first.

    :param truth: set of positive medication indices
    :param probabilities: vector over the medication vocabulary
    """
    probabilities = np.asarray(probabilities, dtype=np.float64)
    if not truth:
        return CONVENTIONS['ap_no_positive']
    order = np.lexsort((np.arange(len(probabilities)), -probabilities))
    hits = np.isin(order, list(truth))
    ranks = np.flatnonzero(hits) + 1
    return float(np.mean(np.arange(1, len(ranks) + 1) / ranks))


def visit_ddi_rate(predicted, adjacency):
    meds = sorted(predicted)
    if len(meds) < 2:
        return CONVENTIONS['ddi_fewer_than_two']
    block = np.asarray(adjacency)[np.ix_(meds, meds)]
    pairs = len(meds) * (len(meds) - 1) / 2
    return float(np.triu(block, k=1).sum()) / pairs


def _per_patient(values):
    means = [float(np.mean(v)) for v in values if len(v)]
    return float(np.mean(means)) if means else 0.0


def jaccard(truth, predicted):
    """
    :param truth: per patient, a list of ground-truth medication sets
    :param predicted: same shape, predicted sets
    """
    return _per_patient([[visit_jaccard(t, p) for t, p in zip(ts, ps)] for ts, ps in zip(truth, predicted)])


def f1(truth, predicted):
    return _per_patient([[visit_f1(t, p) for t, p in zip(ts, ps)] for ts, ps in zip(truth, predicted)])


def prauc(truth, probabilities):
    """
    :param truth: per patient, a list of ground-truth sets
    :param probabilities: per patient, visits x medications
    """
    return _per_patient([[average_precision(t, y) for t, y in zip(ts, ys)] for ts, ys in zip(truth, probabilities)])


def ddi_rate(predicted, adjacency):
    return _per_patient([[visit_ddi_rate(p, adjacency) for p in ps] for ps in predicted])


def med_count(predicted):
    return _per_patient([[len(p) for p in ps] for ps in predicted])


def _visit_rows(prediction, adjacency):
    return [
        {
            'position': int(position),
            'jaccard': visit_jaccard(t, p),
            'f1': visit_f1(t, p),
            'prauc': average_precision(t, y),
            'ddi_rate': visit_ddi_rate(p, adjacency),
            'med_count': len(p),
        }
        for position, t, p, y in zip(prediction.positions, prediction.truth, prediction.predicted,
                                     prediction.probabilities)
    ]


def ground_truth_ddi_rate(sets, adjacency):
    """DDI rate of recorded medication sets, given per patient."""
    return ddi_rate(sets, adjacency)


def bootstrap_evaluate(predictions, adjacency, rounds=10, fraction=0.8, seed=0, replace=True, cold_start=False,
                       config_digest=''):
    """
    Resample patients, score every round and report mean and spread over rounds.

    Round `r` draws ceil(fraction * N) patients from `numpy.random.default_rng([seed, r])`.

    :param predictions: PatientPrediction list from the recommender
    :param adjacency: DDI adjacency matrix (medications x medications)
    :param rounds:
    :param fraction:
    :param seed:
    :param replace: sample with replacement; without it and fraction 1 the rounds are permutations
    """
    if not predictions:
        raise DataError('nothing to evaluate: the split has no patients')
    if rounds < 1 or not 0 < fraction <= 1:
        raise DataError('invalid bootstrap protocol', rounds=rounds, fraction=fraction)

    raw = []
    for prediction in predictions:
        raw.append({'patient_id': prediction.patient_id, 'visits': _visit_rows(prediction, adjacency)})
    table = np.array([
        [np.mean([row[name] for row in patient['visits']]) if patient['visits'] else 0.0 for name in METRICS]
        for patient in raw
    ], dtype=np.float64)

    size = math.ceil(fraction * len(raw))
    scores = []
    for r in range(rounds):
        rng = np.random.default_rng([seed, r])
        picked = rng.choice(len(raw), size=size, replace=replace)
        scores.append(table[picked].mean(axis=0))
    scores = np.array(scores)

    report = EvalReport(
        mean={name: float(value) for name, value in zip(METRICS, scores.mean(axis=0))},
        std={name: float(value) for name, value in zip(METRICS, scores.std(axis=0))},
        rounds=rounds,
        fraction=fraction,
        seed=seed,
        patients=len(raw),
        visits=sum(len(p['visits']) for p in raw),
        cold_start=cold_start,
        ground_truth_ddi=ground_truth_ddi_rate([p.truth for p in predictions], adjacency),
        config_digest=config_digest,
        raw=raw
    )
    logger.info('evaluated %d patients over %d rounds: jaccard %.4f', report.patients, rounds, report.mean['jaccard'])
    return report
