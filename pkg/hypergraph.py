"""`Hypergraph` module: per-domain visit hypergraphs and their augmented views."""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from corpus import DOMAINS, Domain
from errors import ArtifactIOError, BoundsError, ConfigError, DataError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Hypergraph:
    """
    Codes of one domain as nodes, one hyperedge per training visit.

    `visit_ref[j]` names the (patient_id, visit position) hyperedge `j` came from.
    Incidences are stored as two aligned index arrays ordered by hyperedge, then node.
    """
    domain: Domain
    num_nodes: int
    hyperedges: tuple
    visit_ref: tuple
    skipped_visits: int = 0
    node_incidence: tuple = field(init=False, repr=False, compare=False)
    incidence_nodes: np.ndarray = field(init=False, repr=False, compare=False)
    incidence_edges: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        edges = tuple(frozenset(e) for e in self.hyperedges)
        if len(edges) != len(self.visit_ref):
            raise DataError('visit_ref must align with hyperedges', domain=self.domain.value)
        incident = [[] for _ in range(self.num_nodes)]
        nodes_flat, edges_flat = [], []
        for j, members in enumerate(edges):
            if not members:
                raise DataError('empty hyperedge', domain=self.domain.value, hyperedge=j)
            for i in sorted(members):
                if not 0 <= i < self.num_nodes:
                    raise BoundsError('node index out of range', domain=self.domain.value, node=i)
                incident[i].append(j)
                nodes_flat.append(i)
                edges_flat.append(j)
        object.__setattr__(self, 'hyperedges', edges)
        object.__setattr__(self, 'visit_ref', tuple(tuple(ref) for ref in self.visit_ref))
        object.__setattr__(self, 'node_incidence', tuple(tuple(e) for e in incident))
        object.__setattr__(self, 'incidence_nodes', np.asarray(nodes_flat, dtype=np.int64))
        object.__setattr__(self, 'incidence_edges', np.asarray(edges_flat, dtype=np.int64))

    @property
    def num_hyperedges(self):
        return len(self.hyperedges)

    @property
    def num_incidences(self):
        return len(self.incidence_nodes)

    def incident_hyperedges(self, node):
        if not 0 <= node < self.num_nodes:
            raise BoundsError('node index out of range', domain=self.domain.value, node=node)
        return frozenset(self.node_incidence[node])

    def incident_nodes(self, hyperedge):
        if not 0 <= hyperedge < self.num_hyperedges:
            raise BoundsError('hyperedge index out of range', domain=self.domain.value, hyperedge=hyperedge)
        return self.hyperedges[hyperedge]

    def dump_incidence(self, path):
        """Write `node_index <TAB> hyperedge_index` lines for external inspection."""
        try:
            with open(path, 'w', encoding='utf-8') as handle:
                for i, j in zip(self.incidence_nodes.tolist(), self.incidence_edges.tolist()):
                    handle.write(f'{i}\t{j}\n')
        except OSError as ex:
            raise ArtifactIOError('could not write incidence dump', path=str(path)) from ex
        return Path(path)


class DomainHypergraphs(NamedTuple):
    diag: Hypergraph
    proc: Hypergraph
    med: Hypergraph

    def of(self, domain):
        return getattr(self, Domain(domain).value)


def construct_hypergraphs(corpus, split='train'):
    """
    Build the diagnosis, procedure and medication hypergraphs.

    Only visits of `split` become hyperedges, in patient order then visit order. A
    visit with an empty code set in a domain adds no hyperedge to that domain.

    :param corpus: preprocessed EHRCorpus
    :param split='train':
    """
    built = []
    patients = corpus.patients_in(split)
    for domain in DOMAINS:
        edges, refs, skipped = [], [], 0
        for patient in patients:
            for position, visit in enumerate(patient.visits):
                codes = visit.codes(domain)
                if codes:
                    edges.append(codes)
                    refs.append((patient.patient_id, position))
                else:
                    skipped += 1
        if skipped:
            logger.warning('%d %s visits have no %s codes and add no hyperedge', skipped, split, domain.value)
        built.append(Hypergraph(domain, len(corpus.vocab(domain)), edges, refs, skipped))
    return DomainHypergraphs(*built)


@dataclass(frozen=True)
class DropRates:
    node_drop: float = 0.2
    incidence_drop: float = 0.2
    feature_drop: float = 0.2

    def validate(self):
        for name in ('node_drop', 'incidence_drop', 'feature_drop'):
            value = getattr(self, name)
            if not 0.0 <= value < 1.0:
                raise ConfigError('drop rate must lie in [0, 1)', rate=name, value=value)
        return self


@dataclass(frozen=True, eq=False)
class AugmentedView:
    """
    Masks over a base hypergraph; nothing is deleted, so row indices stay aligned.
    """
    base: Hypergraph
    kept_nodes: np.ndarray
    kept_incidences: np.ndarray
    feature_mask: np.ndarray
    seed: object = None
    rates: DropRates = DropRates(0.0, 0.0, 0.0)

    @property
    def active_incidences(self):
        """Incidences that survive both the incidence mask and the node mask."""
        return self.kept_incidences & self.kept_nodes[self.base.incidence_nodes]

    @property
    def active_hyperedges(self):
        edges = self.base.incidence_edges[self.active_incidences]
        return np.bincount(edges, minlength=self.base.num_hyperedges) > 0

    def incidence(self):
        active = self.active_incidences
        return self.base.incidence_nodes[active], self.base.incidence_edges[active]


def augment(h, rates, seed, dim):
    """
    Drop nodes, incidences and feature dimensions independently.

    :param h: Hypergraph
    :param rates: DropRates
    :param seed: anything `numpy.random.default_rng` accepts
    :param dim: embedding width the feature mask covers
    """
    rates.validate()
    rng = np.random.default_rng(seed)
    return AugmentedView(
        base=h,
        kept_nodes=rng.random(h.num_nodes) >= rates.node_drop,
        kept_incidences=rng.random(h.num_incidences) >= rates.incidence_drop,
        feature_mask=rng.random(dim) >= rates.feature_drop,
        seed=seed,
        rates=rates
    )


def full_view(h, dim):
    """The unaugmented view used for export and inference."""
    return AugmentedView(
        base=h,
        kept_nodes=np.ones(h.num_nodes, dtype=bool),
        kept_incidences=np.ones(h.num_incidences, dtype=bool),
        feature_mask=np.ones(dim, dtype=bool)
    )
