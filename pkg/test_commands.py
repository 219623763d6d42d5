import json
import shutil
import tempfile
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pandas as pd
import pytest

import commands
from config import app
from corpus import PROVENANCE_KEY, VOCAB_FILE
from models import Artifact, Run
from settings import load_run_config
from simmr import PatientPrediction

TINY = """
seed = 7

[synth]
num_diag = 40
num_proc = 20
num_med = 24
num_patients = 30
num_clusters = 4
diag_per_visit = 5.0
proc_per_visit = 2.0
med_per_visit = 6.0

[encoder]
dim = 8
layers = 1
heads = 2

[pretrain]
epochs = 2

[recommender]
epochs = 2
heads = 2
top_n = 3

[evaluate]
rounds = 3
"""


@pytest.fixture(scope='module')
def pipeline(tmp_path_factory):
    """Runs the whole pipeline once on a tiny synthetic corpus."""
    root = tmp_path_factory.mktemp('pipeline')
    config = root / 'run.toml'
    config.write_text(TINY, encoding='utf-8')
    runner = app.test_cli_runner()

    def invoke(*args, out=None):
        return runner.invoke(args=[args[0], '--config', str(config), '--output-dir', str(out or root / 'out'),
                                   *args[1:]])

    def fresh_dir(*copied):
        target = Path(tempfile.mkdtemp(dir=root))
        for name in copied:
            source = root / 'out' / name
            if source.is_dir():
                shutil.copytree(source, target / name)
            else:
                shutil.copy(source, target / name)
        return target

    for name in ('synth', 'preprocess', 'pretrain', 'train', 'evaluate'):
        result = invoke(name)
        assert result.exit_code == 0, (name, result.output)
    out = root / 'out'
    return SimpleNamespace(root=root, config=config, out=out, runner=runner, invoke=invoke, fresh_dir=fresh_dir,
                           report=(out / 'report.json').read_bytes(), digest=load_run_config(config).digest())


def latest_run():
    with app.app_context():
        run = Run.query.order_by(Run.id.desc()).first()
        return run.command, run.status, run.message


def test_pipeline_artifacts(pipeline):
    for name in ('raw/corpus.jsonl', 'raw/ddi.edges', 'raw/hierarchy.diag.edges', 'corpus/vocab.json',
                 'statistics.txt', 'statistics.json', 'medrep.ckpt', 'medrep.json', 'khge.med.pt',
                 'simmr.ckpt', 'report.json', 'report.raw.json', 'report.txt', 'hyperehr.log'):
        assert (pipeline.out / name).exists(), name


def test_report_contents(pipeline):
    report = json.loads(pipeline.report)
    assert set(report['mean']) == {'jaccard', 'f1', 'prauc', 'ddi_rate', 'med_count'}
    assert report['rounds'] == 3
    assert not report['cold_start']
    assert report['config_digest'] == pipeline.digest
    for name in ('jaccard', 'f1', 'prauc', 'ddi_rate'):
        assert 0.0 <= report['mean'][name] <= 1.0
    assert 'Jaccard' in (pipeline.out / 'report.txt').read_text()


def test_corpus_files_carry_the_config_digest(pipeline):
    for directory in ('raw', 'corpus'):
        manifest = json.loads((pipeline.out / directory / VOCAB_FILE).read_text())
        assert manifest[PROVENANCE_KEY]['config_digest'] == pipeline.digest
    statistics = json.loads((pipeline.out / 'statistics.json').read_text())
    assert statistics['config_digest'] == pipeline.digest
    assert statistics['corpus_digest']
    assert '# of patients' in statistics['statistics']


def test_evaluation_is_reproducible(pipeline):
    result = pipeline.invoke('evaluate')
    assert result.exit_code == 0, result.output
    assert (pipeline.out / 'report.json').read_bytes() == pipeline.report


def test_cold_start_report(pipeline):
    result = pipeline.invoke('evaluate', '--cold-start')
    assert result.exit_code == 0, result.output
    report = json.loads((pipeline.out / 'report.cold_start.json').read_text())
    assert report['cold_start']
    assert report['visits'] == report['patients']


def test_recommend_from_a_file(pipeline):
    vocab = json.loads((pipeline.out / 'corpus' / VOCAB_FILE).read_text())
    diag, proc, med = vocab['diag'], vocab['proc'], vocab['med']
    request = pipeline.root / 'patients.json'
    request.write_text(json.dumps([
        {'patient_id': 'new', 'history': [{'diag': diag[:2], 'proc': [], 'med': med[:3]}],
         'current': {'diag': diag[2:4], 'proc': proc[:1]}},
        {'current': {'diag': diag[-1:]}},
    ]))
    result = pipeline.invoke('recommend', str(request))
    assert result.exit_code == 0, result.output
    written = json.loads((pipeline.out / 'recommendations.json').read_text())
    assert written['config_digest'] == pipeline.digest
    assert written['simmr_digest']
    recommendations = written['recommendations']
    assert [r['visit_index'] for r in recommendations] == [1, 0]
    assert len(recommendations[0]['probabilities']) == len(med)


def test_recommend_rejects_unknown_codes(pipeline):
    request = pipeline.root / 'bad.json'
    request.write_text(json.dumps({'current': {'diag': ['X999']}}))
    assert pipeline.invoke('recommend', str(request)).exit_code == 3


def test_gate_export(pipeline):
    result = pipeline.invoke('gates')
    assert result.exit_code == 0, result.output
    path = pipeline.out / 'gates.csv'
    assert path.read_text().splitlines()[0] == f'# config_digest={pipeline.digest}'
    frame = pd.read_csv(path, comment='#')
    assert list(frame.columns) == ['patient_id', 'position', 'visit_length', 'alpha_hist', 'alpha_sim', 'jaccard']
    assert (frame['visit_length'] == frame['position'] + 1).all()
    np.testing.assert_allclose(frame['alpha_hist'] + frame['alpha_sim'], 1.0, atol=1e-5)

    summary = json.loads((pipeline.out / 'gates.json').read_text())
    assert summary['config_digest'] == pipeline.digest
    assert summary['min_group_samples'] == commands.MIN_GROUP_SAMPLES
    correlations = summary['spearman_with_jaccard']
    assert set(correlations) == {'groups', 'excluded'}
    sizes = {**{k: v['samples'] for k, v in correlations['groups'].items()}, **correlations['excluded']}
    assert sum(sizes.values()) == len(frame)


def test_runs_are_recorded(pipeline):
    result = pipeline.runner.invoke(args=['runs', '--limit', '50'])
    assert result.exit_code == 0, result.output
    assert 'pretrain' in result.output
    assert 'succeeded' in result.output
    with app.app_context():
        report = Artifact.query.filter_by(kind='report').order_by(Artifact.id.desc()).first()
        kinds = [artifact.kind for artifact in report.lineage]
    assert kinds[0] == 'report'
    assert 'corpus' in kinds


def test_training_without_medrep_never_reads_it(pipeline):
    out = pipeline.fresh_dir('raw', 'corpus')
    assert pipeline.invoke('train', '--medrep-none', out=out).exit_code == 0
    assert not (out / 'medrep.ckpt').exists()
    assert pipeline.invoke('train', out=out).exit_code == 5


def test_checkpoint_from_another_corpus(pipeline):
    out = pipeline.fresh_dir('raw', 'corpus', 'simmr.ckpt')
    assert pipeline.invoke('preprocess', '--resplit', '--seed', '99', out=out).exit_code == 0
    assert pipeline.invoke('evaluate', out=out).exit_code == 3


def test_missing_corpus(pipeline):
    assert pipeline.invoke('evaluate', out=pipeline.fresh_dir()).exit_code == 5


def test_invalid_config_exits_with_two(pipeline):
    bad = pipeline.root / 'bad.toml'
    bad.write_text('[pretrain]\ntemperature = 0.0\n')
    result = pipeline.runner.invoke(args=['train', '--config', str(bad), '--output-dir', str(pipeline.fresh_dir())])
    assert result.exit_code == 2
    command, status, message = latest_run()
    assert (command, status) == ('train', 'failed')
    assert 'temperature' in message
    assert pipeline.invoke('train', '--medrep-none', '--medrep-fixed').exit_code == 2


def test_unexpected_error_is_recorded_as_a_failed_run(pipeline, monkeypatch):
    def broken(config, run=None):
        raise RuntimeError('disk on fire')

    monkeypatch.setattr(commands, 'cmd_synth', broken)
    result = pipeline.invoke('synth', out=pipeline.fresh_dir())
    assert result.exit_code == 1
    assert 'RuntimeError' in result.output
    command, status, message = latest_run()
    assert (command, status) == ('synth', 'failed')
    assert 'RuntimeError: disk on fire' in message


def prediction(patient_id, visits, rank):
    # jaccard 1/(rank+1) against truth {0}; alpha_hist grows with rank
    predicted = frozenset(range(rank + 1))
    return PatientPrediction(
        patient_id=patient_id, positions=list(range(visits)), truth=[frozenset({0})] * visits,
        predicted=[predicted] * visits, probabilities=np.zeros((visits, 8)),
        gates=np.tile([rank / 10, 1 - rank / 10], (visits, 1))
    )


class TestGateTable:

    @pytest.fixture
    def frame(self):
        predictions = [prediction(f'P{n}', 6, n) for n in range(6)] + [prediction('S', 1, 6)]
        return commands.gate_table(predictions)

    def test_visit_length_counts_visits_so_far(self, frame):
        assert list(frame['visit_length'][:6]) == [1, 2, 3, 4, 5, 6]
        assert (frame['visit_length'] == frame['position'] + 1).all()
        assert frame['jaccard'][0] == 1.0
        assert frame['jaccard'][6] == 0.5

    def test_groups_are_split_by_visit_length(self, frame):
        correlations = commands.gate_correlations(frame, min_samples=7)
        assert set(correlations['groups']) == {'1', '5+'}
        assert correlations['excluded'] == {'2': 6, '3': 6, '4': 6}
        assert correlations['groups']['1']['samples'] == 7
        assert correlations['groups']['5+']['samples'] == 12
        for group in correlations['groups'].values():
            assert group['alpha_hist'] == pytest.approx(-1.0)
            assert group['alpha_sim'] == pytest.approx(1.0)

    def test_small_groups_are_excluded_by_default(self, frame):
        correlations = commands.gate_correlations(frame)
        assert correlations['groups'] == {}
        assert sum(correlations['excluded'].values()) == len(frame)

    def test_correlation_is_undefined_for_constant_columns(self):
        frame = commands.gate_table([PatientPrediction(
            patient_id='A', positions=[0], truth=[frozenset({0})], predicted=[frozenset({0})],
            probabilities=np.zeros((1, 2)), gates=np.array([[0.2, 0.8]])
        ) for _ in range(3)])
        correlations = commands.gate_correlations(frame, min_samples=3)
        assert correlations['groups']['1'] == {'samples': 3, 'alpha_hist': None, 'alpha_sim': None}
