from babel.numbers import format_decimal

METRIC_COLUMNS = ('jaccard', 'f1', 'prauc', 'ddi_rate', 'med_count')
METRIC_HEADERS = ('Jaccard', 'F1', 'PRAUC', 'DDI', '#Med.')
# rates are shown in percent, #Med. on its own scale
PERCENT_METRICS = {'jaccard', 'f1', 'prauc', 'ddi_rate'}
LOCALE = 'en_US'


def serialize_patient_instance(patient, split=None):
    record = {
        'patient_id': patient.patient_id,
        'visits': [
            {'diag': sorted(visit.diag), 'proc': sorted(visit.proc), 'med': sorted(visit.med)}
            for visit in patient.visits
        ]
    }
    if split is not None:
        record['split'] = split
    return record


def serialize_recommendation_instance(rec):
    return {
        'patient_id': rec.patient_id,
        'visit_index': rec.visit_index,
        'probabilities': [round(float(p), 6) for p in rec.probabilities],
        'selected_codes': list(rec.selected_codes),
        'alpha_hist': round(float(rec.alpha_hist), 6),
        'alpha_sim': round(float(rec.alpha_sim), 6)
    }


def serialize_summarized_report_instance(report):
    return {
        attr: getattr(report, attr) for attr in [
            'mean', 'std', 'rounds', 'fraction', 'seed', 'cold_start', 'patients',
            'visits', 'conventions', 'ground_truth_ddi', 'reference_ddi', 'config_digest'
        ]
    }


def serialize_detailed_report_instance(report):
    serialized_data = serialize_summarized_report_instance(report)
    serialized_data['raw'] = report.raw
    return serialized_data


def format_metric(name, value, spread=None):
    scale = 100 if name in PERCENT_METRICS else 1
    text = format_decimal(float(value) * scale, format='0.00', locale=LOCALE)
    if spread is not None:
        text += ' ± ' + format_decimal(float(spread) * scale, format='0.00', locale=LOCALE)
    return text


def render_report_table(reports):
    """
    Aligned text table with one row per named report.

    :param reports: mapping of row label -> EvalReport
    """
    rows = [('Model',) + METRIC_HEADERS]
    for label, report in reports.items():
        rows.append((label,) + tuple(
            format_metric(name, report.mean[name], report.std[name]) for name in METRIC_COLUMNS
        ))
    return _align(rows)


def render_statistics_table(statistics, label='Value'):
    rows = [('Item', label)]
    for item, value in statistics.items():
        if value is None:
            text = '-'
        elif isinstance(value, int):
            text = format_decimal(value, format='#,##0', locale=LOCALE)
        else:
            text = format_decimal(value, format='#,##0.00', locale=LOCALE)
        rows.append((item, text))
    return _align(rows)


def _align(rows):
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    lines = ['  '.join(cell.ljust(width) for cell, width in zip(row, widths)).rstrip() for row in rows]
    lines.insert(1, '  '.join('-' * width for width in widths))
    return '\n'.join(lines) + '\n'
