"""`MedRep` module: contrastive pretraining of entity and visit embeddings."""

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from tqdm import tqdm

from corpus import DOMAINS, Domain
from errors import ArtifactIOError, ConfigError, DimensionError, EmptyBatchError, NumericFailure
from hypergraph import DropRates, augment, full_view
from khge import KHGE

logger = logging.getLogger(__name__)

EMBEDDINGS_FORMAT_VERSION = 1


@dataclass
class ContrastiveConfig:
    temperature: float = 0.5
    lambda_edge: float = 1.0
    lambda_membership: float = 1.0
    epochs: int = 300
    learning_rate: float = 1e-3
    weight_decay: float = 1e-5
    rates: DropRates = field(default_factory=DropRates)
    resample_views: bool = False
    seed: int = 42

    def validate(self):
        if self.temperature <= 0:
            raise ConfigError('temperature must be positive', temperature=self.temperature)
        if self.lambda_edge < 0 or self.lambda_membership < 0:
            raise ConfigError('contrastive level weights must be non-negative')
        if self.epochs < 0:
            raise ConfigError('epochs must be non-negative', epochs=self.epochs)
        self.rates.validate()
        return self


@dataclass
class PretrainedEmbeddings:
    entities: dict
    visits: dict
    visit_ref: dict
    config_digest: str = ''
    corpus_digest: str = ''
    history: dict = field(default_factory=dict)

    @property
    def dim(self):
        return self.entities[Domain.DIAG].shape[1]

    def digest(self):
        sha = hashlib.sha256()
        for domain in DOMAINS:
            for array in (self.entities[domain], self.visits[domain]):
                sha.update(np.ascontiguousarray(array, dtype=np.float32).tobytes())
            sha.update(json.dumps(self.visit_ref[domain]).encode('utf-8'))
        sha.update(self.config_digest.encode('utf-8'))
        return sha.hexdigest()

    def check_vocabulary(self, corpus):
        for domain in DOMAINS:
            expected = len(corpus.vocab(domain))
            found = self.entities[domain].shape[0]
            if found != expected:
                raise DimensionError('pretrained entity table does not match vocabulary', domain=domain.value,
                                     expected=expected, found=found)


def info_nce(u, v, temperature):
    """
    Mean over rows of -log softmax of the aligned inner product.

    Row `i` of `u` is paired with row `i` of `v`; every row of `v` is in the denominator.

    :param u: N x d
    :param v: N x d
    :param temperature:
    """
    if u.shape[0] == 0:
        raise EmptyBatchError('InfoNCE over an empty batch')
    if u.shape != v.shape:
        raise DimensionError('InfoNCE needs index-aligned rows', left=tuple(u.shape), right=tuple(v.shape))
    logits = u @ v.T / temperature
    return F.cross_entropy(logits, torch.arange(u.shape[0], device=u.device))


def membership_pairs(view, rng):
    """
    For every node with a surviving incidence, one of its hyperedges drawn uniformly.

    :param view: AugmentedView supplying the hyperedges
    :param rng: numpy Generator
    """
    nodes, edges = view.incidence()
    if len(nodes) == 0:
        return nodes, edges
    order = rng.permutation(len(nodes))
    _, first = np.unique(nodes[order], return_index=True)
    picked = order[first]
    return nodes[picked], edges[picked]


def _term(name, left, right, temperature):
    if left.shape[0] == 0:
        logger.warning('every row of the %s-level contrast is masked; term set to 0', name)
        return left.new_zeros(())
    return info_nce(left, right, temperature)


def contrastive_loss(space1, space2, config, membership=None):
    """
    Node-, hyperedge- and membership-level InfoNCE between two views.

    Rows dropped by either view leave the node and hyperedge terms; membership pairs
    a node kept in view 1 with a sampled incident hyperedge of view 2.

    :param space1: EmbeddingSpace of view 1
    :param space2: EmbeddingSpace of view 2
    :param config: ContrastiveConfig
    :param membership: (nodes, hyperedges) from `membership_pairs` on view 2
    """
    tau = config.temperature
    nodes = space1.node_mask & space2.node_mask
    edges = space1.edge_mask & space2.edge_mask
    parts = {
        'node': _term('node', space1.Z[nodes], space2.Z[nodes], tau),
        'edge': _term('hyperedge', space1.U[edges], space2.U[edges], tau),
    }
    if membership is None:
        parts['membership'] = space1.Z.new_zeros(())
    else:
        member_nodes, member_edges = (torch.as_tensor(a, device=space1.Z.device) for a in membership)
        keep = space1.node_mask[member_nodes]
        parts['membership'] = _term(
            'membership', space1.Z[member_nodes[keep]], space2.U[member_edges[keep]], tau
        )
    loss = parts['node'] + config.lambda_edge * parts['edge'] + config.lambda_membership * parts['membership']
    return loss, {name: float(value) for name, value in parts.items()}


class MedRepTrainer:
    """
    Owns one encoder per domain and runs the two-view contrastive schedule.

    :param hypergraphs: DomainHypergraphs
    :param config: ContrastiveConfig
    :param encoder_config: EncoderConfig
    :param knowledge_biases: domain -> KnowledgeBias
    :param quiet: hide progress bars
    """

    def __init__(self, hypergraphs, config, encoder_config, knowledge_biases=None, quiet=True):
        self.hypergraphs = hypergraphs
        self.config = config.validate()
        self.encoder_config = encoder_config.validate()
        self.quiet = quiet
        knowledge_biases = knowledge_biases or {}
        torch.manual_seed(config.seed)
        self.encoders = {
            domain: KHGE(hypergraphs.of(domain).num_nodes, encoder_config, knowledge_biases.get(domain))
            for domain in DOMAINS
        }
        self.history = {domain: [] for domain in DOMAINS}

    def views(self, domain, epoch):
        stamp = epoch if self.config.resample_views else 0
        h = self.hypergraphs.of(domain)
        index = DOMAINS.index(domain)
        return tuple(
            augment(h, self.config.rates, [self.config.seed, index, stamp, side], self.encoder_config.dim)
            for side in (1, 2)
        )

    def fit_domain(self, domain):
        h = self.hypergraphs.of(domain)
        encoder = self.encoders[domain]
        if h.num_hyperedges == 0:
            logger.warning('%s hypergraph has no hyperedges; skipping pretraining', domain.value)
            return encoder
        optimizer = torch.optim.RMSprop(
            encoder.parameters(), lr=self.config.learning_rate,
            weight_decay=self.config.weight_decay, momentum=0.0
        )
        rng = np.random.default_rng([self.config.seed, DOMAINS.index(domain), 7])
        view1, view2 = self.views(domain, 1)
        encoder.train()
        for epoch in tqdm(range(1, self.config.epochs + 1), desc=f'MedRep {domain.value}', disable=self.quiet):
            if self.config.resample_views and epoch > 1:
                view1, view2 = self.views(domain, epoch)
            pairs = membership_pairs(view2, rng)
            loss, parts = contrastive_loss(encoder(view1), encoder(view2), self.config, pairs)
            if not torch.isfinite(loss):
                raise NumericFailure('contrastive loss diverged', epoch=epoch, domain=domain.value)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            self.history[domain].append(float(loss))
            logger.debug('MedRep %s epoch %d loss %.4f %s', domain.value, epoch, float(loss), parts)
        if self.history[domain]:
            logger.info('MedRep %s: loss %.4f -> %.4f over %d epochs', domain.value,
                        self.history[domain][0], self.history[domain][-1], self.config.epochs)
        return encoder

    def fit(self):
        for domain in DOMAINS:
            self.fit_domain(domain)
        return self

    @torch.no_grad()
    def export(self, config_digest='', corpus_digest=''):
        """Full-graph forward pass of every trained encoder."""
        entities, visits, refs = {}, {}, {}
        for domain in DOMAINS:
            h = self.hypergraphs.of(domain)
            encoder = self.encoders[domain]
            encoder.eval()
            space = encoder(full_view(h, self.encoder_config.dim))
            entities[domain] = space.Z.detach().cpu().numpy().astype(np.float32)
            visits[domain] = space.U.detach().cpu().numpy().astype(np.float32)
            refs[domain] = [list(ref) for ref in h.visit_ref]
        history = {domain.value: list(values) for domain, values in self.history.items()}
        return PretrainedEmbeddings(entities, visits, refs, config_digest, corpus_digest, history)


def pretrain(hypergraphs, config, encoder_config, knowledge_biases=None, config_digest='', corpus_digest='', quiet=True):
    """
    Stage one: contrastive training of all three domains, then export.

    :param hypergraphs: DomainHypergraphs built from the training split
    :param config: ContrastiveConfig
    :param encoder_config: EncoderConfig
    """
    trainer = MedRepTrainer(hypergraphs, config, encoder_config, knowledge_biases, quiet)
    return trainer.fit().export(config_digest, corpus_digest)


def sidecar_path(path):
    return Path(path).with_suffix('.json')


def save_embeddings(embeddings, path):
    """
    Write the embedding bundle as a NumPy archive plus a JSON sidecar.

    Arrays: `Z_<domain>`, `U_<domain>`, `ref_patient_<domain>`, `ref_position_<domain>`
    and `config_digest`.

    :param embeddings: PretrainedEmbeddings
    :param path: usually `medrep.ckpt`
    """
    arrays = {'config_digest': np.array(embeddings.config_digest)}
    for domain in DOMAINS:
        refs = embeddings.visit_ref[domain]
        arrays[f'Z_{domain.value}'] = embeddings.entities[domain]
        arrays[f'U_{domain.value}'] = embeddings.visits[domain]
        arrays[f'ref_patient_{domain.value}'] = np.array([str(r[0]) for r in refs], dtype=str)
        arrays[f'ref_position_{domain.value}'] = np.array([int(r[1]) for r in refs], dtype=np.int64)
    sidecar = {
        'format_version': EMBEDDINGS_FORMAT_VERSION,
        'config_digest': embeddings.config_digest,
        'corpus_digest': embeddings.corpus_digest,
        'digest': embeddings.digest(),
        'history': embeddings.history,
    }
    try:
        with open(path, 'wb') as handle:
            np.savez(handle, **arrays)
        sidecar_path(path).write_text(json.dumps(sidecar, indent=2, sort_keys=True), encoding='utf-8')
    except OSError as ex:
        raise ArtifactIOError('could not write embeddings', path=str(path)) from ex
    return Path(path)


def load_embeddings(path):
    try:
        with np.load(path, allow_pickle=False) as archive:
            arrays = {name: archive[name] for name in archive.files}
        sidecar = json.loads(sidecar_path(path).read_text(encoding='utf-8'))
    except (OSError, ValueError) as ex:
        raise ArtifactIOError('could not read embeddings', path=str(path)) from ex
    if sidecar.get('format_version') != EMBEDDINGS_FORMAT_VERSION:
        raise ArtifactIOError('unsupported embeddings version', path=str(path))

    entities, visits, refs = {}, {}, {}
    for domain in DOMAINS:
        entities[domain] = arrays[f'Z_{domain.value}']
        visits[domain] = arrays[f'U_{domain.value}']
        refs[domain] = [
            [str(p), int(q)] for p, q in zip(arrays[f'ref_patient_{domain.value}'], arrays[f'ref_position_{domain.value}'])
        ]
        if len(refs[domain]) != visits[domain].shape[0]:
            raise DimensionError('visit_ref does not align with visit embeddings', domain=domain.value)
    return PretrainedEmbeddings(
        entities, visits, refs, str(arrays['config_digest']), sidecar.get('corpus_digest', ''),
        sidecar.get('history', {})
    )
