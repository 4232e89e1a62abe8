# -*- coding: utf-8 -*-
from flask import url_for


def records(frame):
    """DataFrame rows as JSON-safe dicts (NaN becomes null)."""
    return frame.astype(object).where(frame.notna(), None).to_dict('records')


def groups_schema(frame, run):
    return {
        'self': url_for('.groups', run=run, _external=True),
        'kind': 'GroupManifest',
        'groups': records(frame),
        'group_count': len(frame),
        'coupling_groups': int((frame['group_type'] == 'coupling').sum()),
        'total_params': int(frame['parameters'].sum()),
    }


def frontier_schema(frame, boundary, fractions, run):
    return {
        'self': url_for('.frontier', run=run, _external=True),
        'kind': 'Frontier',
        'candidates': records(frame),
        'count': len(frame),
        'boundary': boundary,
        'stable_fraction_by_decile': fractions,
    }


def verdicts_schema(frame, run):
    labels = []
    for label, rows in frame.groupby('config_label', sort=True):
        labels.append({
            'config_label': label,
            'stable': bool(rows['stable'].astype(int).min() == 1),
            'episodes': records(rows.drop(columns=['config_label'])),
        })
    return {
        'self': url_for('.verdicts', run=run, _external=True),
        'kind': 'VerdictCollection',
        'labels': labels,
        'count': len(labels),
    }


def bench_schema(frame, run):
    return {
        'self': url_for('.bench', run=run, _external=True),
        'kind': 'BenchCollection',
        'rows': records(frame),
        'count': len(frame),
    }
