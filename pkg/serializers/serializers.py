"""Module for serializing corpus records, evaluation reports and recommendations."""

from .utils import (
    serialize_patient_instance, serialize_recommendation_instance,
    serialize_detailed_report_instance, serialize_summarized_report_instance,
    render_report_table, render_statistics_table
)

__all__ = [
    'serialize_patient', 'serialize_vocabularies', 'serialize_recommendation',
    'serialize_report', 'render_report_table', 'render_statistics_table'
]


def serialize_patient(patients, many=False, split=None):
    """
    Serializer for patient records, one JSON object per patient.

    :param patients:
    :param many=False:
    :param split=None: patient_id -> split label
    """
    split = split or {}
    if many:
        return [serialize_patient_instance(patient, split.get(patient.patient_id)) for patient in patients]
    return serialize_patient_instance(patients, split.get(patients.patient_id))


def serialize_vocabularies(vocabularies):
    return {domain.value: list(vocab.codes) for domain, vocab in vocabularies.items()}


def serialize_recommendation(recommendations, many=False):
    """
    Serializer for recommendations.

    :param recommendations:
    :param many=False:
    """
    if many:
        return [serialize_recommendation_instance(rec) for rec in recommendations]
    return serialize_recommendation_instance(recommendations)


def serialize_report(reports, many=False, summarized=True):
    """
    Serializer for evaluation reports.

    :param reports:
    :param many=False:
    :param summarized=True: drop the per-visit raw values
    """
    serializer_func = serialize_summarized_report_instance if summarized else serialize_detailed_report_instance
    return [serializer_func(report) for report in reports] if many else serializer_func(reports)
