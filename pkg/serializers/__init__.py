from .serializers import (
    render_report_table, render_statistics_table, serialize_patient, serialize_recommendation, serialize_report,
    serialize_vocabularies
)
