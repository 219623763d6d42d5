"""`Commands` module: the pipeline subcommands registered on the Flask CLI."""

import functools
import hashlib
import json
import os
import sys
from pathlib import Path

import click
import numpy as np
import pandas as pd

from config import app, attach_file_log, db
from corpus import (
    DOMAINS, assign_splits, corpus_statistics, generate_synthetic, load_corpus, load_ddi, load_hierarchy,
    preprocess, save_corpus, synthetic_ddi_edges, synthetic_hierarchy, write_edges
)
from errors import ArtifactIOError, HyperEHRError, InputError, LineageError
from hypergraph import construct_hypergraphs
from khge import build_knowledge_bias, save_encoder
from medrep import MedRepTrainer, load_embeddings, save_embeddings
from metrics import bootstrap_evaluate, visit_jaccard
from models import Run, record_artifact, start_run
from serializers import render_report_table, render_statistics_table, serialize_recommendation, serialize_report
from settings import load_run_config
from simmr import load_recommender, predict_corpus, read_provenance, recommend_codes, save_recommender, train_simmr

MIN_GROUP_SAMPLES = 20
LONG_HISTORY = 5


def _quiet():
    return not sys.stderr.isatty()


def file_digest(path):
    try:
        with open(path, 'rb') as handle:
            if hasattr(hashlib, 'file_digest'):
                return hashlib.file_digest(handle, 'sha256').hexdigest()
            digest = hashlib.sha256()
            for chunk in iter(lambda: handle.read(1 << 16), b''):
                digest.update(chunk)
            return digest.hexdigest()
    except OSError as ex:
        raise ArtifactIOError('could not hash artifact', path=str(path)) from ex


def write_text(path, text):
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text, encoding='utf-8')
    except OSError as ex:
        raise ArtifactIOError('could not write output', path=str(path)) from ex
    return Path(path)


def _record(run, *args, **kwargs):
    if run is not None:
        return record_artifact(run, *args, **kwargs)


def _ddi(config, corpus):
    path = config.paths.ddi_edges
    if not path.exists():
        app.logger.warning('no DDI edge list at %s; the DDI terms are zero', path)
        return None
    return load_ddi(path, corpus.vocab('med'))


def _adjacency(ddi, corpus):
    if ddi is None:
        size = len(corpus.vocab('med'))
        return np.zeros((size, size), dtype=np.int8)
    return ddi.adjacency


def _checked_model(config, corpus, **overrides):
    """Load `simmr.ckpt`, refusing a checkpoint trained on another corpus."""
    path = config.paths.simmr
    provenance = read_provenance(path)
    if provenance.get('corpus_digest') != corpus.digest():
        raise LineageError('simmr.ckpt was trained on a different corpus', path=str(path),
                           expected=corpus.digest()[:12], found=str(provenance.get('corpus_digest'))[:12])
    return load_recommender(path, corpus, **overrides)


def cmd_synth(config, run=None):
    """Write a planted-structure corpus, its hierarchies and a DDI edge list to the raw directory."""
    corpus = generate_synthetic(config.synth)
    raw = config.paths.raw
    save_corpus(corpus, raw, config.digest())
    write_edges(synthetic_ddi_edges(corpus, config.synth), raw / 'ddi.edges')
    for domain in DOMAINS:
        vocab = corpus.vocab(domain)
        if len(vocab):
            write_edges(synthetic_hierarchy(vocab, config.synth.num_clusters), raw / f'hierarchy.{domain.value}.edges')
    _record(run, 'corpus', raw, corpus.digest())
    return f'{len(corpus)} synthetic patients written to {raw}'


def cmd_preprocess(config, run=None):
    """Filter the raw corpus, assign splits when missing or asked to, and print the statistics table."""
    raw = load_corpus(config.paths.raw)
    settings = config.preprocess
    corpus = preprocess(raw, settings.min_code_freq, settings.min_visits, settings.until_stable)
    if settings.resplit or not corpus.split:
        corpus = assign_splits(corpus, config.synth.split_ratios, config.seed)
    save_corpus(corpus, config.paths.corpus, config.digest())

    statistics = corpus_statistics(corpus)
    table = render_statistics_table(statistics, label='Processed')
    write_text(config.paths.out / 'statistics.txt', table)
    write_text(config.paths.out / 'statistics.json', json.dumps({
        'config_digest': config.digest(), 'corpus_digest': corpus.digest(), 'statistics': statistics
    }, indent=2))
    click.echo(table, nl=False)
    _record(run, 'corpus', config.paths.corpus, corpus.digest(), parent_digest=raw.digest())
    return f'{len(corpus)} patients after preprocessing'


def cmd_pretrain(config, run=None):
    """Contrastive pretraining of the three domain encoders; writes `medrep.ckpt`."""
    corpus = load_corpus(config.paths.corpus)
    hypergraphs = construct_hypergraphs(corpus, 'train')
    biases = {}
    if config.encoder.knowledge_bias:
        for domain in DOMAINS:
            vocab = corpus.vocab(domain)
            path = config.paths.hierarchy(domain)
            hierarchy = load_hierarchy(path, vocab) if path.exists() else None
            if hierarchy is None:
                app.logger.info('no %s hierarchy at %s; every pair sits at distance 2', domain.value, path)
            biases[domain] = build_knowledge_bias(hierarchy, vocab, config.encoder)

    trainer = MedRepTrainer(hypergraphs, config.pretrain, config.encoder, biases, quiet=_quiet()).fit()
    embeddings = trainer.export(config.digest(), corpus.digest())
    save_embeddings(embeddings, config.paths.medrep)
    for domain, encoder in trainer.encoders.items():
        save_encoder(encoder, config.paths.encoder(domain))
    _record(run, 'medrep', config.paths.medrep, embeddings.digest(), parent_digest=corpus.digest())
    return f'MedRep embeddings written to {config.paths.medrep}'


def cmd_train(config, run=None):
    """Train the recommender, initialised from MedRep unless `medrep_none`; writes `simmr.ckpt`."""
    corpus = load_corpus(config.paths.corpus)
    pretrained = None
    if not config.ablations.medrep_none:
        pretrained = load_embeddings(config.paths.medrep)
        if pretrained.corpus_digest != corpus.digest():
            raise LineageError('medrep.ckpt was trained on a different corpus', path=str(config.paths.medrep))
    model = train_simmr(corpus, pretrained, config.recommender, dim=config.encoder.dim,
                        ddi=_ddi(config, corpus), quiet=_quiet())
    medrep_digest = pretrained.digest() if pretrained is not None else None
    save_recommender(model, config.paths.simmr, provenance={
        'config_digest': config.digest(),
        'corpus_digest': corpus.digest(),
        'medrep_digest': medrep_digest,
    })
    _record(run, 'simmr', config.paths.simmr, file_digest(config.paths.simmr),
            parent_digest=medrep_digest or corpus.digest())
    best = max(model.history) if model.history else float('nan')
    return f'SimMR checkpoint written to {config.paths.simmr} (best val jaccard {best:.4f})'


def cmd_evaluate(config, run=None, top_n=None, window=None):
    """Bootstrap evaluation on the test split; writes `report.json` and `report.txt`."""
    corpus = load_corpus(config.paths.corpus)
    model = _checked_model(config, corpus, top_n=top_n, window=window)
    test = list(corpus.patients_in('test'))
    if not test:
        raise InputError('test split is empty')
    cold = config.evaluate.cold_start
    predictions = predict_corpus(model, test, cold_start=cold)
    report = bootstrap_evaluate(
        predictions, _adjacency(_ddi(config, corpus), corpus), rounds=config.evaluate.rounds,
        fraction=config.evaluate.fraction, seed=config.seed, replace=config.evaluate.replace,
        cold_start=cold, config_digest=config.digest()
    )
    stem = 'report.cold_start' if cold else 'report'
    text = json.dumps(serialize_report(report), indent=2, sort_keys=True) + '\n'
    path = write_text(config.paths.out / f'{stem}.json', text)
    write_text(config.paths.out / f'{stem}.raw.json', json.dumps(report.raw, sort_keys=True) + '\n')
    table = render_report_table({'SimMR (cold start)' if cold else 'SimMR': report})
    write_text(config.paths.out / f'{stem}.txt', table)
    click.echo(table, nl=False)
    _record(run, 'report', path, hashlib.sha256(text.encode('utf-8')).hexdigest(),
            parent_digest=file_digest(config.paths.simmr))
    return f'jaccard {report.mean["jaccard"]:.4f} over {report.patients} patients'


def _read_requests(path):
    try:
        payload = json.loads(Path(path).read_text(encoding='utf-8'))
    except OSError as ex:
        raise ArtifactIOError('could not read patient input', path=str(path)) from ex
    except json.JSONDecodeError as ex:
        raise InputError('patient input is not valid JSON', path=str(path)) from ex
    return payload if isinstance(payload, list) else [payload]


def cmd_recommend(config, input_path, run=None, top_n=None, window=None):
    """Recommend medications for every patient in a JSON input file; writes `recommendations.json`."""
    corpus = load_corpus(config.paths.corpus)
    model = _checked_model(config, corpus, top_n=top_n, window=window)
    recommendations = []
    for request in _read_requests(input_path):
        if not isinstance(request, dict):
            raise InputError('each patient entry must be an object')
        recommendations.append(recommend_codes(
            model, request.get('patient_id'), request.get('history', []), request.get('current', {})
        ))
    text = json.dumps({
        'config_digest': config.digest(),
        'simmr_digest': file_digest(config.paths.simmr),
        'recommendations': serialize_recommendation(recommendations, many=True),
    }, indent=2) + '\n'
    path = write_text(config.paths.out / 'recommendations.json', text)
    click.echo(text, nl=False)
    _record(run, 'recommendations', path, hashlib.sha256(text.encode('utf-8')).hexdigest(),
            parent_digest=file_digest(config.paths.simmr))
    return f'{len(recommendations)} recommendations written to {path}'


def gate_table(predictions):
    """One row per evaluated visit: visit length (visits so far), both gate weights and the visit Jaccard."""
    rows = []
    for prediction in predictions:
        for k, position in enumerate(prediction.positions):
            rows.append({
                'patient_id': prediction.patient_id,
                'position': position,
                'visit_length': prediction.visit_lengths[k],
                'alpha_hist': float(prediction.gates[k][0]),
                'alpha_sim': float(prediction.gates[k][1]),
                'jaccard': visit_jaccard(prediction.truth[k], prediction.predicted[k]),
            })
    return pd.DataFrame(rows, columns=['patient_id', 'position', 'visit_length', 'alpha_hist', 'alpha_sim', 'jaccard'])


def _rho(value):
    return None if pd.isna(value) else round(float(value), 6)


def gate_correlations(frame, min_samples=MIN_GROUP_SAMPLES, cap=LONG_HISTORY):
    """
    Spearman correlation of each gate weight with the visit Jaccard inside every visit-length group.

    Lengths from `cap` on share the group `'<cap>+'`. Groups with fewer than `min_samples`
    visits are left out and reported with their size under `excluded`. A correlation is None
    when a column is constant within the group.
    """
    groups, excluded = {}, {}
    keyed = frame.assign(group=frame['visit_length'].clip(upper=cap))
    for length, group in keyed.groupby('group', sort=True):
        label = str(int(length)) if length < cap else f'{cap}+'
        if len(group) < min_samples:
            excluded[label] = len(group)
            continue
        matrix = group[['alpha_hist', 'alpha_sim', 'jaccard']].corr(method='spearman')
        groups[label] = {
            'samples': len(group),
            'alpha_hist': _rho(matrix.loc['alpha_hist', 'jaccard']),
            'alpha_sim': _rho(matrix.loc['alpha_sim', 'jaccard']),
        }
    return {'groups': groups, 'excluded': excluded}


def cmd_gates(config, run=None, top_n=None, window=None):
    """Per-visit gate weights on the test split; writes `gates.csv` and `gates.json`."""
    corpus = load_corpus(config.paths.corpus)
    model = _checked_model(config, corpus, top_n=top_n, window=window)
    test = list(corpus.patients_in('test'))
    if not test:
        raise InputError('test split is empty')
    frame = gate_table(predict_corpus(model, test))
    path = config.paths.out / 'gates.csv'
    try:
        with open(path, 'w', encoding='utf-8', newline='') as handle:
            handle.write(f'# config_digest={config.digest()}\n')
            frame.to_csv(handle, index=False, float_format='%.6f')
    except OSError as ex:
        raise ArtifactIOError('could not write gate table', path=str(path)) from ex
    correlations = gate_correlations(frame)
    if correlations['excluded']:
        app.logger.warning('visit-length groups below %d visits left out: %s', MIN_GROUP_SAMPLES,
                           correlations['excluded'])
    write_text(config.paths.out / 'gates.json', json.dumps({
        'config_digest': config.digest(),
        'min_group_samples': MIN_GROUP_SAMPLES,
        'spearman_with_jaccard': correlations,
    }, indent=2) + '\n')
    app.logger.info('gate correlation with jaccard by visit length: %s', correlations['groups'])
    _record(run, 'gates', path, file_digest(path), parent_digest=file_digest(config.paths.simmr))
    return f'{len(frame)} visits written to {path}'


def _fail(name, run, message, exit_code):
    if run is None:
        run = start_run(name)
    run.finish('failed', message)
    db.session.commit()
    click.echo(f'error: {message}', err=True)
    sys.exit(exit_code)


def pipeline_command(name):
    """
    Turn `cmd_<name>` into a CLI command that loads the run config, records the run and
    maps pipeline errors to exit codes.

    Pipeline errors exit with their own code; anything else is logged with its traceback and
    exits with the base `HyperEHRError` code. Either way the run is recorded as failed.
    """
    def decorator(func):
        @click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False), default=None)
        @click.option('--seed', type=int, default=None)
        @click.option('--output-dir', type=click.Path(file_okay=False), default=None)
        @functools.wraps(func)
        def command(config_path, seed, output_dir, **options):
            run = None
            overrides = {key: (value or None) if isinstance(value, bool) else value
                         for key, value in options.items() if key in OVERRIDES}
            extra = {key: value for key, value in options.items() if key not in OVERRIDES}
            try:
                os.makedirs(app.config['OUTPUT_DIR'], exist_ok=True)
                db.create_all()
                config = load_run_config(config_path, seed=seed, output_dir=output_dir, **overrides)
                attach_file_log(config.paths.output_dir)
                run = start_run(name, config)
                message = func(config, run, **extra)
                run.finish('succeeded', message)
                db.session.commit()
                app.logger.info('%s: %s', name, message)
                click.echo(message)
            except HyperEHRError as ex:
                db.session.rollback()
                app.logger.error('%s failed: %s', name, ex)
                _fail(name, run, str(ex), ex.exit_code)
            except Exception as ex:
                db.session.rollback()
                app.logger.exception('%s failed with an internal error', name)
                _fail(name, run, f'internal error: {type(ex).__name__}: {ex}', HyperEHRError.exit_code)
            finally:
                db.session.close()
        return app.cli.command(name)(command)
    return decorator


OVERRIDES = {
    'no_sim', 'no_hist', 'medrep_none', 'medrep_fixed', 'freeze_embeddings', 'no_knowledge_bias',
    'top_n', 'window', 'cold_start', 'resample_views', 'resplit'
}


def _flag(name, help):
    return click.option(name, is_flag=True, default=False, help=help)


@pipeline_command('synth')
def synth_command(config, run):
    """Generate a synthetic corpus."""
    return cmd_synth(config, run)


@pipeline_command('preprocess')
@_flag('--resplit', 'reassign train/val/test splits')
def preprocess_command(config, run):
    """Filter and split the raw corpus."""
    return cmd_preprocess(config, run)


@pipeline_command('pretrain')
@_flag('--no-knowledge-bias', 'drop the hierarchy bias from global attention')
@_flag('--resample-views', 'draw fresh augmented views every epoch')
def pretrain_command(config, run):
    """Contrastive pretraining (stage one)."""
    return cmd_pretrain(config, run)


@pipeline_command('train')
@_flag('--no-sim', 'disable the similar-visit channel')
@_flag('--no-hist', 'disable the history channel')
@_flag('--medrep-none', 'random initialisation instead of MedRep')
@_flag('--medrep-fixed', 'MedRep initialisation, frozen')
@_flag('--freeze-embeddings', 'keep the embedding tables fixed')
@click.option('--top-n', type=int, default=None)
@click.option('--window', type=int, default=None)
def train_command(config, run):
    """Train the recommender (stage two)."""
    return cmd_train(config, run)


@pipeline_command('evaluate')
@_flag('--cold-start', 'score first visits only')
@click.option('--top-n', 'eval_top_n', type=int, default=None)
@click.option('--window', 'eval_window', type=int, default=None)
def evaluate_command(config, run, eval_top_n=None, eval_window=None):
    """Bootstrap evaluation on the test split."""
    return cmd_evaluate(config, run, top_n=eval_top_n, window=eval_window)


@pipeline_command('recommend')
@click.argument('input_path', type=click.Path(exists=True, dir_okay=False))
@click.option('--top-n', 'eval_top_n', type=int, default=None)
@click.option('--window', 'eval_window', type=int, default=None)
def recommend_command(config, run, input_path, eval_top_n=None, eval_window=None):
    """Recommend medications for patients in INPUT_PATH."""
    return cmd_recommend(config, input_path, run, top_n=eval_top_n, window=eval_window)


@pipeline_command('gates')
@click.option('--top-n', 'eval_top_n', type=int, default=None)
@click.option('--window', 'eval_window', type=int, default=None)
def gates_command(config, run, eval_top_n=None, eval_window=None):
    """Export per-visit gate weights."""
    return cmd_gates(config, run, top_n=eval_top_n, window=eval_window)


@app.cli.command('runs')
@click.option('--limit', type=int, default=20)
def runs_command(limit):
    """List the most recent pipeline runs."""
    db.create_all()
    for run in Run.query.order_by(Run.id.desc()).limit(limit).all():
        summary = run.summary
        click.echo(
            f"{summary['id']:>4}  {summary['command']:<10} {summary['status']:<9} seed={summary['seed']} "
            f"config={summary['config_digest']} artifacts={','.join(summary['artifacts']) or '-'}"
        )
