"""`Corpus` module: the EHR data model, preprocessing, synthetic corpora and file IO."""

import hashlib
import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import networkx as nx
import numpy as np

from errors import (
    ArtifactIOError, ConfigError, CorpusExhaustedError, CorpusFormatError,
    DataError, HierarchyError, InputError
)
from serializers import serialize_patient, serialize_vocabularies

logger = logging.getLogger(__name__)

SPLITS = ('train', 'val', 'test')
DEFAULT_SPLIT_RATIOS = (2 / 3, 1 / 6, 1 / 6)
ROOT = '<root>'
CORPUS_FILE = 'corpus.jsonl'
VOCAB_FILE = 'vocab.json'
PROVENANCE_KEY = 'provenance'


class Domain(str, Enum):
    DIAG = 'diag'
    PROC = 'proc'
    MED = 'med'


DOMAINS = (Domain.DIAG, Domain.PROC, Domain.MED)


@dataclass(frozen=True)
class CodeVocabulary:
    domain: Domain
    codes: tuple
    index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        codes = tuple(self.codes)
        if len(set(codes)) != len(codes):
            raise DataError('duplicate codes in vocabulary', domain=self.domain.value)
        object.__setattr__(self, 'codes', codes)
        object.__setattr__(self, 'index', {code: i for i, code in enumerate(codes)})

    def __len__(self):
        return len(self.codes)

    def encode(self, codes):
        """
        Map code strings to a frozenset of vocabulary positions.

        :param codes: iterable of code strings
        """
        unknown = [code for code in codes if code not in self.index]
        if unknown:
            raise InputError('unknown codes', domain=self.domain.value, codes=','.join(map(str, unknown)))
        return frozenset(self.index[code] for code in codes)

    def decode(self, indices):
        return tuple(self.codes[i] for i in sorted(indices))

    def multi_hot(self, indices):
        bits = np.zeros(len(self.codes), dtype=np.uint8)
        bits[list(indices)] = 1
        return bits

    def from_multi_hot(self, bits):
        bits = np.asarray(bits)
        if bits.shape != (len(self.codes),):
            raise DataError('multi-hot length differs from vocabulary size', domain=self.domain.value)
        return frozenset(int(i) for i in np.flatnonzero(bits))


@dataclass(frozen=True)
class Visit:
    diag: frozenset = frozenset()
    proc: frozenset = frozenset()
    med: frozenset = frozenset()

    def __post_init__(self):
        for name in ('diag', 'proc', 'med'):
            object.__setattr__(self, name, frozenset(int(i) for i in getattr(self, name)))

    def codes(self, domain):
        return getattr(self, Domain(domain).value)


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    visits: tuple

    def __post_init__(self):
        object.__setattr__(self, 'visits', tuple(self.visits))


@dataclass(frozen=True)
class EHRCorpus:
    vocabularies: dict
    patients: tuple
    split: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, 'patients', tuple(self.patients))

    def __len__(self):
        return len(self.patients)

    def vocab(self, domain):
        return self.vocabularies[Domain(domain)]

    def patients_in(self, split):
        return tuple(p for p in self.patients if self.split.get(p.patient_id) == split)

    @property
    def visit_count(self):
        return sum(len(p.visits) for p in self.patients)

    def validate(self):
        """
        Check index bounds, patient id uniqueness and split coverage.
        """
        seen = set()
        for patient in self.patients:
            if patient.patient_id in seen:
                raise CorpusFormatError('duplicate patient id', patient_id=patient.patient_id)
            seen.add(patient.patient_id)
            for position, visit in enumerate(patient.visits):
                for domain in DOMAINS:
                    size = len(self.vocab(domain))
                    if any(i < 0 or i >= size for i in visit.codes(domain)):
                        raise CorpusFormatError(
                            'code index out of range', patient_id=patient.patient_id,
                            visit=position, domain=domain.value
                        )
        if self.split:
            if set(self.split) != seen:
                raise CorpusFormatError('split does not cover exactly the corpus patients')
            bad = {value for value in self.split.values() if value not in SPLITS}
            if bad:
                raise CorpusFormatError('unknown split label', labels=','.join(sorted(bad)))
        return self

    def digest(self):
        sha = hashlib.sha256()
        for line in corpus_lines(self):
            sha.update(line.encode('utf-8'))
            sha.update(b'\n')
        return sha.hexdigest()


@dataclass(frozen=True)
class DDIMatrix:
    adjacency: np.ndarray
    skipped: int = 0

    def __post_init__(self):
        a = self.adjacency
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise DataError('DDI matrix must be square')
        if not np.array_equal(a, a.T) or np.any(np.diag(a)) or not np.isin(a, (0, 1)).all():
            raise DataError('DDI matrix must be symmetric 0/1 with zero diagonal')

    def __len__(self):
        return self.adjacency.shape[0]

    def pairs(self):
        rows, cols = np.nonzero(np.triu(self.adjacency, k=1))
        return list(zip(rows.tolist(), cols.tolist()))


@dataclass(frozen=True)
class CodeHierarchy:
    domain: Domain
    root: str
    parent: dict
    depth: dict

    def ancestors(self, code):
        """Path from `code` up to, but excluding, the root."""
        path = []
        while code != self.root:
            path.append(code)
            code = self.parent[code]
        return path


@dataclass
class SynthConfig:
    num_diag: int = 400
    num_proc: int = 200
    num_med: int = 131
    num_patients: int = 200
    min_patient_visits: int = 2
    mean_visits: float = 2.37
    max_visits: int = 8
    num_clusters: int = 8
    diag_per_visit: float = 10.51
    proc_per_visit: float = 3.84
    med_per_visit: float = 11.44
    noise: float = 0.1
    persistence: float = 0.7
    ddi_density: float = 0.02
    split_ratios: tuple = DEFAULT_SPLIT_RATIOS
    seed: int = 0

    def validate(self):
        sizes = {'diag': self.num_diag, 'med': self.num_med}
        if self.num_proc:
            sizes['proc'] = self.num_proc
        for name, size in sizes.items():
            if self.num_clusters > size:
                raise ConfigError('more clusters than codes', domain=name, clusters=self.num_clusters, codes=size)
        if self.num_clusters < 1:
            raise ConfigError('num_clusters must be positive')
        if not 0.0 <= self.noise <= 1.0:
            raise ConfigError('noise must lie in [0, 1]', noise=self.noise)
        if self.min_patient_visits < 1 or self.max_visits < self.min_patient_visits:
            raise ConfigError('invalid visit-count bounds')
        return self


def _rebuild(corpus, visits_by_patient, split):
    """Re-index a corpus densely over the codes still referenced by its visits."""
    present = {domain: set() for domain in DOMAINS}
    for visits in visits_by_patient.values():
        for visit in visits:
            for domain in DOMAINS:
                present[domain].update(visit[domain])

    vocabularies = {
        domain: CodeVocabulary(domain, [c for c in corpus.vocab(domain).codes if c in present[domain]])
        for domain in DOMAINS
    }
    patients = []
    for patient_id, visits in visits_by_patient.items():
        patients.append(PatientRecord(patient_id, [
            Visit(**{domain.value: vocabularies[domain].encode(visit[domain]) for domain in DOMAINS})
            for visit in visits
        ]))
    return EHRCorpus(vocabularies, patients, {pid: split[pid] for pid in visits_by_patient if pid in split})


def _filter_once(corpus, min_code_freq, min_visits):
    counts = {domain: Counter() for domain in DOMAINS}
    for patient in corpus.patients:
        for visit in patient.visits:
            for domain in DOMAINS:
                counts[domain].update(corpus.vocab(domain).decode(visit.codes(domain)))

    dropped_visits = 0
    kept = {}
    for patient in corpus.patients:
        visits = []
        for visit in patient.visits:
            filtered = {
                domain: [c for c in corpus.vocab(domain).decode(visit.codes(domain)) if counts[domain][c] >= min_code_freq]
                for domain in DOMAINS
            }
            if filtered[Domain.DIAG] and filtered[Domain.MED]:
                visits.append(filtered)
            else:
                dropped_visits += 1
        if len(visits) >= min_visits:
            kept[patient.patient_id] = visits

    if not kept:
        raise CorpusExhaustedError('corpus exhausted by filtering', min_code_freq=min_code_freq, min_visits=min_visits)
    if dropped_visits:
        logger.warning('dropped %d visits left without diagnoses or medications', dropped_visits)
    logger.info('kept %d of %d patients', len(kept), len(corpus.patients))
    return _rebuild(corpus, kept, corpus.split)


def preprocess(raw, min_code_freq=1, min_visits=2, until_stable=False):
    """
    Drop rare codes, then patients with too few remaining visits, and re-index.

    Code frequencies are counted once, before patients are filtered. With
    `until_stable` the pass is repeated until nothing changes.

    :param raw: EHRCorpus
    :param min_code_freq: minimum occurrences for a code to be kept
    :param min_visits: minimum visits for a patient to be kept
    :param until_stable: iterate to a fixpoint
    """
    if min_visits < 2:
        raise ConfigError('min_visits must be at least 2', min_visits=min_visits)
    corpus = _filter_once(raw, min_code_freq, min_visits)
    while until_stable:
        again = _filter_once(corpus, min_code_freq, min_visits)
        if again == corpus:
            break
        corpus = again
    return corpus


def assign_splits(corpus, ratios=DEFAULT_SPLIT_RATIOS, seed=0):
    """
    Patient-level train/val/test assignment.

    :param corpus: EHRCorpus
    :param ratios: train, val, test fractions
    :param seed:
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-6):
        raise ConfigError('split ratios must be three non-negative fractions summing to 1')
    ids = [p.patient_id for p in corpus.patients]
    order = np.random.default_rng(seed).permutation(len(ids))
    n_train = int(len(ids) * ratios[0])
    n_val = int(len(ids) * ratios[1])
    split = {}
    for rank, position in enumerate(order):
        split[ids[position]] = 'train' if rank < n_train else 'val' if rank < n_train + n_val else 'test'
    return EHRCorpus(corpus.vocabularies, corpus.patients, split)


def corpus_statistics(corpus):
    """Dataset table rows, named as the published statistics table names them."""
    visits = [v for p in corpus.patients for v in p.visits]
    n_visits = max(len(visits), 1)
    has_proc = len(corpus.vocab(Domain.PROC)) > 0

    def per_visit(domain):
        return sum(len(v.codes(domain)) for v in visits) / n_visits

    return {
        '# of patients': len(corpus.patients),
        '# of visits': len(visits),
        'avg. # of visits': len(visits) / max(len(corpus.patients), 1),
        '# of unique diag. codes': len(corpus.vocab(Domain.DIAG)),
        '# of unique proc. codes': len(corpus.vocab(Domain.PROC)) if has_proc else None,
        '# of unique med. codes': len(corpus.vocab(Domain.MED)),
        'avg. # of diag. per visit': per_visit(Domain.DIAG),
        'avg. # of proc. per visit': per_visit(Domain.PROC) if has_proc else None,
        'avg. # of med. per visit': per_visit(Domain.MED),
    }


def _cluster_pools(size, num_clusters):
    return [np.arange(c, size, num_clusters) for c in range(num_clusters)]


def canonical_medications(config, rng=None):
    """
    The medication set each latent condition cluster prescribes when noise is 0.

    :param config: SynthConfig
    :param rng: generator positioned at the start of the synthetic stream
    """
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    pools = _cluster_pools(config.num_med, config.num_clusters)
    target = min(max(int(round(config.med_per_visit)), 1), config.num_med)
    canonical = []
    for c in range(config.num_clusters):
        candidates = []
        step = 0
        while len(candidates) < target:
            candidates.extend(pools[(c + step) % config.num_clusters].tolist())
            step += 1
        chosen = rng.choice(np.array(candidates), size=target, replace=False)
        canonical.append(frozenset(int(i) for i in chosen))
    return canonical


def _draw_codes(rng, pool, mean, vocab_size, noise, at_least):
    count = int(np.clip(rng.poisson(mean), at_least, len(pool)))
    chosen = rng.choice(pool, size=count, replace=False)
    swap = rng.random(count) < noise
    chosen[swap] = rng.integers(vocab_size, size=int(swap.sum()))
    return frozenset(int(i) for i in chosen)


def generate_synthetic(config):
    """
    Generate a corpus with planted condition clusters.

    Each visit belongs to a latent cluster which fixes where its diagnoses and
    procedures come from and which canonical medication set it receives; `noise`
    perturbs all three.

    :param config: SynthConfig
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    canonical = canonical_medications(config, rng)
    k = config.num_clusters
    diag_pools = _cluster_pools(config.num_diag, k)
    proc_pools = _cluster_pools(config.num_proc, k) if config.num_proc else None

    vocabularies = {
        Domain.DIAG: CodeVocabulary(Domain.DIAG, [f'D{i:04d}' for i in range(config.num_diag)]),
        Domain.PROC: CodeVocabulary(Domain.PROC, [f'P{i:04d}' for i in range(config.num_proc)]),
        Domain.MED: CodeVocabulary(Domain.MED, [f'M{i:04d}' for i in range(config.num_med)]),
    }

    patients = []
    extra_mean = max(config.mean_visits - config.min_patient_visits, 0.0)
    for n in range(config.num_patients):
        n_visits = int(min(config.min_patient_visits + rng.poisson(extra_mean), config.max_visits))
        cluster = int(rng.integers(k))
        visits = []
        for _ in range(n_visits):
            if visits and rng.random() >= config.persistence:
                cluster = int(rng.integers(k))
            diag = _draw_codes(rng, diag_pools[cluster], config.diag_per_visit, config.num_diag, config.noise, 1)
            proc = frozenset()
            if proc_pools is not None:
                proc = _draw_codes(rng, proc_pools[cluster], config.proc_per_visit, config.num_proc, config.noise, 0)
            base = sorted(canonical[cluster])
            kept = [m for m in base if rng.random() >= config.noise]
            extra = rng.integers(config.num_med, size=int(rng.binomial(len(base), config.noise)))
            med = frozenset(kept) | frozenset(int(m) for m in extra)
            if not med:
                med = frozenset(base[:1])
            visits.append(Visit(diag, proc, med))
        patients.append(PatientRecord(f'P{n:06d}', visits))

    corpus = assign_splits(EHRCorpus(vocabularies, patients), config.split_ratios, config.seed)
    stats = corpus_statistics(corpus)
    logger.info(
        'synthetic corpus: %d patients, %d visits, avg diag %.2f, proc %s, med %.2f per visit',
        stats['# of patients'], stats['# of visits'], stats['avg. # of diag. per visit'],
        'n/a' if stats['avg. # of proc. per visit'] is None else f"{stats['avg. # of proc. per visit']:.2f}",
        stats['avg. # of med. per visit']
    )
    return corpus


def synthetic_hierarchy(vocab, num_clusters):
    """
    A two-level category tree mirroring the planted clusters: code -> group -> root.

    :param vocab: CodeVocabulary
    :param num_clusters:
    """
    prefix = vocab.domain.value.upper()
    edges = [(ROOT, f'{prefix}-G{c:02d}') for c in range(min(num_clusters, max(len(vocab), 1)))]
    edges += [(f'{prefix}-G{i % num_clusters:02d}', code) for i, code in enumerate(vocab.codes)]
    return edges


def synthetic_ddi_edges(corpus, config):
    """
    Random interacting medication pairs, rarer inside a canonical prescription.

    :param corpus: EHRCorpus from `generate_synthetic`
    :param config: the SynthConfig it was generated with
    """
    canonical = canonical_medications(config)
    together = set()
    for meds in canonical:
        together.update((a, b) for a in meds for b in meds if a < b)
    rng = np.random.default_rng([config.seed, 1])
    codes = corpus.vocab(Domain.MED).codes
    edges = []
    for a in range(len(codes)):
        for b in range(a + 1, len(codes)):
            density = config.ddi_density / 4 if (a, b) in together else config.ddi_density
            if rng.random() < density:
                edges.append((codes[a], codes[b]))
    return edges


def corpus_lines(corpus):
    yield json.dumps(serialize_vocabularies(corpus.vocabularies), sort_keys=True)
    for line in serialize_patient(corpus.patients, many=True, split=corpus.split):
        yield json.dumps(line, sort_keys=True)


def save_corpus(corpus, path, config_digest=None):
    """
    Write `corpus.jsonl` (one patient per line) and `vocab.json` under `path`.

    `vocab.json` also records the corpus digest and the digest of the config that produced it.

    :param corpus: EHRCorpus
    :param path: output directory
    :param config_digest: RunConfig digest, or None when written outside the pipeline
    """
    path = Path(path)
    lines = corpus_lines(corpus)
    manifest = json.loads(next(lines))
    manifest[PROVENANCE_KEY] = {'config_digest': config_digest, 'corpus_digest': corpus.digest()}
    try:
        path.mkdir(parents=True, exist_ok=True)
        (path / VOCAB_FILE).write_text(json.dumps(manifest, sort_keys=True) + '\n', encoding='utf-8')
        with open(path / CORPUS_FILE, 'w', encoding='utf-8') as handle:
            for line in lines:
                handle.write(line + '\n')
    except OSError as ex:
        raise ArtifactIOError('could not write corpus', path=str(path), reason=str(ex)) from ex
    return path


def _parse_patient(record, vocabularies, line_no):
    patient_id = record.get('patient_id') if isinstance(record, dict) else None
    if not isinstance(patient_id, str) or not isinstance(record.get('visits'), list):
        raise CorpusFormatError('record needs a string patient_id and a visits list', line=line_no)
    visits = []
    for position, raw in enumerate(record['visits']):
        if not isinstance(raw, dict):
            raise CorpusFormatError('visit must be an object', patient_id=patient_id, line=line_no)
        sets = {}
        for domain in DOMAINS:
            values = raw.get(domain.value, [])
            size = len(vocabularies[domain])
            if not isinstance(values, list) or any(
                isinstance(i, bool) or not isinstance(i, int) or not 0 <= i < size for i in values
            ):
                raise CorpusFormatError(
                    'code index out of range', patient_id=patient_id, line=line_no,
                    visit=position, domain=domain.value
                )
            sets[domain.value] = values
        visits.append(Visit(**sets))
    return PatientRecord(patient_id, visits), record.get('split')


def load_corpus(path):
    """
    Read a corpus directory written by `save_corpus`.

    :param path: directory holding `corpus.jsonl` and `vocab.json`
    """
    path = Path(path)
    try:
        manifest = json.loads((path / VOCAB_FILE).read_text(encoding='utf-8'))
        lines = (path / CORPUS_FILE).read_text(encoding='utf-8').splitlines()
    except (OSError, json.JSONDecodeError) as ex:
        raise ArtifactIOError('could not read corpus', path=str(path), reason=str(ex)) from ex

    try:
        vocabularies = {domain: CodeVocabulary(domain, manifest.get(domain.value, [])) for domain in DOMAINS}
    except (AttributeError, TypeError) as ex:
        raise CorpusFormatError('malformed vocabulary manifest', path=str(path / VOCAB_FILE)) from ex

    patients, split = [], {}
    for line_no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as ex:
            raise CorpusFormatError('invalid JSON', line=line_no) from ex
        patient, label = _parse_patient(record, vocabularies, line_no)
        patients.append(patient)
        if label is not None:
            split[patient.patient_id] = label
    return EHRCorpus(vocabularies, patients, split).validate()


def _read_edges(path):
    try:
        text = Path(path).read_text(encoding='utf-8')
    except OSError as ex:
        raise ArtifactIOError('could not read edge list', path=str(path), reason=str(ex)) from ex
    for line in text.splitlines():
        if line.strip() and not line.startswith('#'):
            yield line.rstrip('\n').split('\t')


def write_edges(edges, path):
    try:
        with open(path, 'w', encoding='utf-8') as handle:
            for a, b in edges:
                handle.write(f'{a}\t{b}\n')
    except OSError as ex:
        raise ArtifactIOError('could not write edge list', path=str(path), reason=str(ex)) from ex
    return Path(path)


def load_ddi(path, med_vocab):
    """
    Build the symmetric DDI adjacency from a tab-separated medication pair list.

    Pairs naming unknown codes are skipped and counted; self pairs are ignored.

    :param path: `ddi.edges`
    :param med_vocab: medication CodeVocabulary
    """
    adjacency = np.zeros((len(med_vocab), len(med_vocab)), dtype=np.int8)
    skipped = 0
    for fields in _read_edges(path):
        if len(fields) != 2 or fields[0] not in med_vocab.index or fields[1] not in med_vocab.index:
            skipped += 1
            continue
        i, j = med_vocab.index[fields[0]], med_vocab.index[fields[1]]
        if i == j:
            continue
        adjacency[i, j] = adjacency[j, i] = 1
    if skipped:
        logger.warning('skipped %d DDI pairs with unknown codes', skipped)
    return DDIMatrix(adjacency, skipped)


def hierarchy_from_edges(domain, edges, vocab):
    """
    Build a CodeHierarchy from parent/child pairs.

    A single parentless node is the root; several are attached to a synthetic root.
    Vocabulary codes the edges never mention hang directly under the root.

    :param domain:
    :param edges: iterable of (parent, child)
    :param vocab: CodeVocabulary
    """
    graph = nx.DiGraph()
    graph.add_edges_from(edges)
    if not nx.is_directed_acyclic_graph(graph):
        cycle = [u for u, _ in nx.find_cycle(graph)]
        raise HierarchyError('cycle in code hierarchy', domain=Domain(domain).value, cycle=' -> '.join(cycle + cycle[:1]))
    multi = sorted(str(n) for n in graph if graph.in_degree(n) > 1)
    if multi:
        raise HierarchyError('codes with several parents', domain=Domain(domain).value, codes=','.join(multi))

    tops = [n for n in graph if graph.in_degree(n) == 0]
    root = tops[0] if len(tops) == 1 else ROOT
    if root == ROOT:
        graph.add_node(ROOT)
        graph.add_edges_from((ROOT, n) for n in tops if n != ROOT)
    missing = [code for code in vocab.codes if code not in graph]
    graph.add_edges_from((root, code) for code in missing)
    if missing:
        logger.info('%d %s codes missing from the hierarchy attach to the root', len(missing), Domain(domain).value)

    depth = nx.single_source_shortest_path_length(graph, root)
    parent = {child: p for p, child in graph.edges()}
    return CodeHierarchy(Domain(domain), root, parent, dict(depth))


def load_hierarchy(path, vocab):
    """
    Read `hierarchy.<domain>.edges` (tab-separated parent, child).

    :param path:
    :param vocab: CodeVocabulary of the same domain
    """
    edges = []
    for fields in _read_edges(path):
        if len(fields) != 2:
            raise HierarchyError('hierarchy line must hold parent and child', path=str(path))
        edges.append((fields[0], fields[1]))
    return hierarchy_from_edges(vocab.domain, edges, vocab)
