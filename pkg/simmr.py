"""`SimMR` module: the recommender fusing a history channel with retrieved similar visits."""

import copy
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

from corpus import DOMAINS, CodeVocabulary, Domain, PatientRecord, Visit
from errors import ArtifactIOError, ConfigError, DimensionError, InputError, NumericFailure
from medrep import info_nce

logger = logging.getLogger(__name__)

RECOMMENDER_FORMAT_VERSION = 1
EPS = 1e-8


@dataclass
class LossWeights:
    multi: float = 0.05
    ddi: float = 0.01
    aux: float = 0.1

    def validate(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ConfigError('loss weight must be non-negative', weight=name, value=value)
        return self


@dataclass
class SimMRConfig:
    window: int = 8
    top_n: int = 10
    threshold: float = 0.5
    temperature: float = 0.5
    weights: LossWeights = field(default_factory=LossWeights)
    learning_rate: float = 5e-4
    weight_decay: float = 1e-5
    dropout: float = 0.1
    epochs: int = 50
    batch_size: int = 16
    heads: int = 4
    no_sim: bool = False
    no_hist: bool = False
    freeze_embeddings: bool = False
    seed: int = 42

    def validate(self):
        if self.no_sim and self.no_hist:
            raise ConfigError('no_sim and no_hist together leave no channel')
        if self.window < 0 or self.top_n < 0:
            raise ConfigError('window and top_n must be non-negative', window=self.window, top_n=self.top_n)
        if self.temperature <= 0:
            raise ConfigError('temperature must be positive', temperature=self.temperature)
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError('epochs must be non-negative and batch_size positive')
        self.weights.validate()
        return self

    @property
    def uses_similar(self):
        return not self.no_sim and self.top_n > 0


@dataclass
class VisitBatch:
    """
    Every visit of a list of patients, flattened in patient then visit order.

    `window[n]` holds flat indices of the preceding visits of the same patient (oldest
    first, -1 padding); `rows[n]` is the training-visit row or -1.
    """
    multi_hot: dict
    window: torch.Tensor
    owners: list
    rows: torch.Tensor

    def __len__(self):
        return len(self.owners)


@dataclass
class VisitContext:
    v_diag: torch.Tensor
    v_proc: torch.Tensor
    v_med: torch.Tensor
    health: torch.Tensor
    v_hist: torch.Tensor
    v_sim: torch.Tensor
    alpha: torch.Tensor
    v_t: torch.Tensor
    logits: torch.Tensor
    retrieved: np.ndarray = None
    no_evidence: torch.Tensor = None

    @property
    def probabilities(self):
        return torch.sigmoid(self.logits)


@dataclass
class Recommendation:
    patient_id: str
    visit_index: int
    probabilities: np.ndarray
    selected: frozenset
    selected_codes: tuple
    alpha_hist: float
    alpha_sim: float


@dataclass
class PatientPrediction:
    patient_id: str
    positions: list
    truth: list
    predicted: list
    probabilities: np.ndarray
    gates: np.ndarray

    @property
    def visit_lengths(self):
        """Visits recorded so far at each scored position, the current one included."""
        return [position + 1 for position in self.positions]


def _check_owner(patient_id, position):
    if patient_id is not None and (isinstance(position, bool) or not isinstance(position, (int, np.integer))):
        raise InputError('retrieval exclusion needs the query position with the patient id',
                         patient_id=patient_id, position=position)


class RetrievalIndex:
    """
    Health-status keys and medication values of the training visits.

    :param keys: U^H rows
    :param values: U^M rows
    :param visit_ref: (patient_id, position) per row
    :param temperature: similarity scale
    """

    def __init__(self, keys, values, visit_ref, temperature=1.0):
        if keys.shape != values.shape or keys.shape[0] != len(visit_ref):
            raise DimensionError('retrieval keys, values and visit_ref must align')
        self.keys = keys
        self.values = values
        self.visit_ref = [tuple(ref) for ref in visit_ref]
        self.temperature = temperature
        self.patient_ids = np.array([ref[0] for ref in self.visit_ref], dtype=object)
        self.positions = np.array([int(ref[1]) for ref in self.visit_ref], dtype=np.int64)

    def __len__(self):
        return len(self.visit_ref)

    def excluded(self, patient_id, position):
        """Rows of the query patient at or after the query position."""
        _check_owner(patient_id, position)
        if patient_id is None or not len(self):
            return np.zeros(len(self), dtype=bool)
        return (self.patient_ids == patient_id) & (self.positions >= position)

    def scores(self, queries):
        return queries @ self.keys.T / self.temperature


def select_topk(scores, index, k, owners=None):
    """
    Row indices of the `k` best allowed keys per query, -1 padded.

    :param scores: numpy B x N similarity matrix
    :param index: RetrievalIndex
    :param k:
    :param owners: (patient_id, position) per query, or None to exclude nothing
    """
    scores = np.asarray(scores)
    picked = np.full((scores.shape[0], k), -1, dtype=np.int64)
    short = 0
    for b in range(scores.shape[0]):
        allowed = ~index.excluded(*owners[b]) if owners is not None else np.ones(scores.shape[1], dtype=bool)
        candidates = np.flatnonzero(allowed)
        # stable sort keeps the lower row first on equal scores
        ranked = candidates[np.argsort(-scores[b, candidates], kind='stable')][:k]
        picked[b, :len(ranked)] = ranked
        short += len(ranked) < k
    if short and k:
        logger.warning('top_n=%d exceeds the retrievable pool for %d queries; returning the full pool', k, short)
    return picked


def retrieve_topk(query, index, k, patient_id=None, position=None):
    """
    Inner-product search over the index for one health-status vector.

    :returns: list of (row, score), best first
    """
    _check_owner(patient_id, position)
    with torch.no_grad():
        scores = index.scores(query.reshape(1, -1)).cpu().numpy()
    owners = [(patient_id, position)] if patient_id is not None else None
    rows = select_topk(scores, index, k, owners)[0]
    return [(int(r), float(scores[0, r])) for r in rows if r >= 0]


def bce_loss(m, y, eps=EPS):
    """Binary cross entropy summed over medications, averaged over visits."""
    picked = torch.where(m.bool(), y, 1 - y).clamp(min=eps, max=1.0)
    return -torch.log(picked).sum(-1).mean()


def multilabel_margin_loss(m, y):
    """Hinge of every (present, absent) probability pair, normalised by the medication count."""
    m = m.to(y.dtype)
    diff = y.unsqueeze(-1) - y.unsqueeze(-2)
    pairs = m.unsqueeze(-1) * (1 - m).unsqueeze(-2)
    return (F.relu(1 - diff) * pairs).sum((-1, -2)).div(y.shape[-1]).mean()


def ddi_loss(y, adjacency):
    """Full double sum of `A_ij y_i y_j`; each interacting pair is counted twice."""
    return ((y @ adjacency.to(y.dtype)) * y).sum(-1).mean()


def orthogonality_loss(a, b, eps=EPS):
    """Absolute cosine between the two channels; 0 where either vector is (near) zero."""
    sq_a, sq_b = (a * a).sum(-1), (b * b).sum(-1)
    valid = (sq_a >= eps * eps) & (sq_b >= eps * eps)
    cos = (a * b).sum(-1) / (sq_a.clamp(min=eps * eps).sqrt() * sq_b.clamp(min=eps * eps).sqrt())
    return torch.where(valid, cos.abs(), torch.zeros_like(cos)).mean()


def alignment_loss(health, v_med, key_rows, value_rows, temperature):
    """
    In-batch contrast of each visit against its own training-visit rows.

    :param health: N x d
    :param v_med: N x d, from the recorded medications
    :param key_rows: N x d U^H rows of the same visits
    :param value_rows: N x d U^M rows
    """
    if health.shape[0] == 0:
        return health.new_zeros(())
    return info_nce(health, key_rows, temperature) + info_nce(v_med, value_rows, temperature)


def total_loss(components, weights):
    """
    Weighted objective.

    :param components: mapping with bce, multi, ddi, align, orth
    :param weights: LossWeights
    """
    weights.validate()
    return (
        components['bce'] + weights.multi * components['multi'] + weights.ddi * components['ddi']
        + weights.aux * (components['align'] + components['orth'])
    )


def select(y, threshold):
    """Indices whose probability reaches the threshold."""
    return frozenset(int(i) for i in np.flatnonzero(np.asarray(y) >= threshold))


def _uniform(rows, dim):
    bound = 1.0 / np.sqrt(dim)
    return torch.empty(rows, dim).uniform_(-bound, bound)


class SimMR(nn.Module):
    """
    Trainable entity and training-visit tables plus the attention, projection and gate layers.

    :param sizes: domain -> vocabulary size
    :param visit_ref: (patient_id, position) of each training visit
    :param dim: embedding width
    :param config: SimMRConfig
    :param ddi: DDIMatrix or None
    :param vocabularies: domain -> CodeVocabulary, kept for decoding
    """

    def __init__(self, sizes, visit_ref, dim, config, ddi=None, vocabularies=None):
        super().__init__()
        config.validate()
        if dim % config.heads:
            raise ConfigError('dim must be divisible by heads', dim=dim, heads=config.heads)
        self.config = config
        self.dim = dim
        self.sizes = {Domain(d): int(n) for d, n in sizes.items()}
        self.visit_ref = [tuple(ref) for ref in visit_ref]
        self.row_of = {ref: row for row, ref in enumerate(self.visit_ref)}
        self.vocabularies = vocabularies

        self.entities = nn.ParameterDict({d.value: nn.Parameter(_uniform(self.sizes[d], dim)) for d in DOMAINS})
        self.visits = nn.ParameterDict({d.value: nn.Parameter(_uniform(len(self.visit_ref), dim)) for d in DOMAINS})
        self.set_attention = nn.ModuleDict({
            d.value: nn.MultiheadAttention(dim, config.heads, dropout=config.dropout, batch_first=True)
            for d in DOMAINS
        })
        self.health = nn.Linear(2 * dim, dim)
        with torch.no_grad():
            self.health.weight.copy_(torch.cat([torch.eye(dim), torch.eye(dim)], dim=1))
            self.health.bias.zero_()
        self.history_attention = nn.MultiheadAttention(dim, config.heads, dropout=config.dropout, batch_first=True)
        self.similar_attention = nn.MultiheadAttention(dim, config.heads, dropout=config.dropout, batch_first=True)
        self.gate = nn.Sequential(nn.Linear(2 * dim, dim), nn.ReLU(), nn.Linear(dim, 2))
        self.no_evidence_bias = nn.Parameter(torch.zeros(2))

        size = self.sizes[Domain.MED]
        adjacency = torch.zeros(size, size) if ddi is None else torch.as_tensor(ddi.adjacency, dtype=torch.float32)
        if adjacency.shape != (size, size):
            raise DimensionError('DDI matrix does not match the medication vocabulary', expected=size,
                                 found=adjacency.shape[0])
        self.register_buffer('ddi', adjacency)
        self.history = []

    @classmethod
    def from_corpus(cls, corpus, config, dim, pretrained=None, ddi=None):
        """
        Build the model for a corpus, copying pretrained tables when given.

        Visit rows follow the training patients in order; a row whose visit has no
        pretrained hyperedge in a domain (e.g. no procedures) starts at zero.
        """
        visit_ref = [
            (p.patient_id, t) for p in corpus.patients_in('train') for t in range(len(p.visits))
        ]
        sizes = {d: len(corpus.vocab(d)) for d in DOMAINS}
        model = cls(sizes, visit_ref, dim, config, ddi, corpus.vocabularies)
        if pretrained is not None:
            pretrained.check_vocabulary(corpus)
            if pretrained.dim != dim:
                raise DimensionError('pretrained width differs from the recommender width', expected=dim,
                                     found=pretrained.dim)
            model.load_pretrained(pretrained)
        if config.freeze_embeddings:
            for table in list(model.entities.values()) + list(model.visits.values()):
                table.requires_grad_(False)
        return model

    @torch.no_grad()
    def load_pretrained(self, pretrained):
        for domain in DOMAINS:
            self.entities[domain.value].copy_(torch.as_tensor(pretrained.entities[domain]))
            table = torch.zeros(len(self.visit_ref), self.dim)
            source = torch.as_tensor(pretrained.visits[domain])
            for row, ref in enumerate(pretrained.visit_ref[domain]):
                target = self.row_of.get((ref[0], int(ref[1])))
                if target is not None:
                    table[target] = source[row]
            self.visits[domain.value].copy_(table)

    def index(self):
        keys = self.visits[Domain.DIAG.value] + self.visits[Domain.PROC.value]
        return RetrievalIndex(keys, self.visits[Domain.MED.value], self.visit_ref, self.config.temperature)

    def batch(self, patients):
        """
        Flatten patients into a VisitBatch.

        :param patients: PatientRecords; every visit is encoded
        """
        device = self.ddi.device
        bits = {d: [] for d in DOMAINS}
        window, owners, rows = [], [], []
        for patient in patients:
            start = len(owners)
            for t, visit in enumerate(patient.visits):
                for domain in DOMAINS:
                    codes = visit.codes(domain)
                    if any(i < 0 or i >= self.sizes[domain] for i in codes):
                        raise InputError('code index out of range', domain=domain.value, patient_id=patient.patient_id)
                    row = np.zeros(self.sizes[domain], dtype=np.float32)
                    row[list(codes)] = 1.0
                    bits[domain].append(row)
                past = list(range(start + max(0, t - self.config.window), start + t))
                window.append([-1] * (self.config.window - len(past)) + past)
                owners.append((patient.patient_id, t))
                rows.append(self.row_of.get((patient.patient_id, t), -1))
        multi_hot = {
            d: torch.as_tensor(np.stack(bits[d]) if bits[d] else np.zeros((0, self.sizes[d]), dtype=np.float32),
                               device=device)
            for d in DOMAINS
        }
        return VisitBatch(
            multi_hot=multi_hot,
            window=torch.as_tensor(np.array(window, dtype=np.int64).reshape(len(owners), self.config.window),
                                   device=device),
            owners=owners,
            rows=torch.as_tensor(np.array(rows, dtype=np.int64), device=device)
        )

    def visit_representation(self, domain, multi_hot):
        """
        Mean of member entity rows, refined by attention over the whole entity table.

        An empty set pools to the zero vector.
        """
        table = self.entities[Domain(domain).value]
        counts = multi_hot.sum(-1, keepdim=True).clamp(min=1.0)
        pooled = (multi_hot / counts) @ table
        if table.shape[0] == 0:
            return pooled
        refined, _ = self.set_attention[Domain(domain).value](pooled, table, table, need_weights=False)
        return refined

    def health_status(self, v_diag, v_proc):
        return self.health(torch.cat([v_diag, v_proc], dim=-1))

    def historical_channel(self, health, past, valid):
        """
        :param health: N x d
        :param past: N x w x d
        :param valid: N x w, False on padding
        """
        if past.shape[1] == 0:
            return health
        has_history = valid.any(-1)
        # a fully padded row would give NaN; attend to slot 0 and discard the output
        padding = ~valid
        padding[~has_history, 0] = False
        attended, _ = self.history_attention(
            health.unsqueeze(1), past, past, key_padding_mask=padding, need_weights=False
        )
        return health + torch.where(has_history.unsqueeze(-1), attended.squeeze(1), torch.zeros_like(health))

    def similar_channel(self, health, retrieved, index):
        """
        Attention from the health status over retrieved keys with medication values.

        :param retrieved: numpy N x k rows, -1 padded
        :returns: (v_sim, no_evidence)
        """
        rows = torch.as_tensor(retrieved, device=health.device)
        valid = rows >= 0
        no_evidence = ~valid.any(-1)
        if rows.shape[1] == 0:
            return torch.zeros_like(health), no_evidence
        safe = rows.clamp(min=0)
        keys, values = index.keys[safe], index.values[safe]
        padding = ~valid
        padding[no_evidence, 0] = False
        attended, _ = self.similar_attention(
            health.unsqueeze(1), keys, values, key_padding_mask=padding, need_weights=False
        )
        return torch.where(no_evidence.unsqueeze(-1), torch.zeros_like(health), attended.squeeze(1)), no_evidence

    def fuse_channels(self, v_hist, v_sim, no_evidence=None):
        logits = self.gate(torch.cat([v_hist, v_sim], dim=-1))
        if no_evidence is not None:
            logits = logits + no_evidence.unsqueeze(-1).to(logits.dtype) * self.no_evidence_bias
        alpha = torch.softmax(logits, dim=-1)
        return alpha[:, :1] * v_hist + alpha[:, 1:] * v_sim, alpha

    def forward(self, batch):
        v = {d: self.visit_representation(d, batch.multi_hot[d]) for d in DOMAINS}
        health = self.health_status(v[Domain.DIAG], v[Domain.PROC])

        past_all = v[Domain.DIAG] + v[Domain.PROC] + v[Domain.MED]
        valid = batch.window >= 0
        past = past_all[batch.window.clamp(min=0)] if len(batch) else past_all.new_zeros(0, batch.window.shape[1], self.dim)
        v_hist = self.historical_channel(health, past, valid)

        retrieved, no_evidence = None, torch.zeros(len(batch), dtype=torch.bool, device=health.device)
        v_sim = torch.zeros_like(health)
        index = self.index()
        if self.config.uses_similar:
            scores = index.scores(health).detach().cpu().numpy()
            retrieved = select_topk(scores, index, self.config.top_n, batch.owners)
            v_sim, no_evidence = self.similar_channel(health, retrieved, index)

        ones, zeros = torch.ones_like(health[:, :1]), torch.zeros_like(health[:, :1])
        if not self.config.uses_similar:
            v_t, alpha = v_hist, torch.cat([ones, zeros], dim=-1)
        elif self.config.no_hist:
            v_t, alpha = v_sim, torch.cat([zeros, ones], dim=-1)
        else:
            v_t, alpha = self.fuse_channels(v_hist, v_sim, no_evidence)

        return VisitContext(
            v_diag=v[Domain.DIAG], v_proc=v[Domain.PROC], v_med=v[Domain.MED], health=health,
            v_hist=v_hist, v_sim=v_sim, alpha=alpha, v_t=v_t,
            logits=v_t @ self.entities[Domain.MED.value].T,
            retrieved=retrieved, no_evidence=no_evidence
        )

    def loss(self, batch, context):
        """
        Objective of one batch.

        :returns: (total, parts as floats)
        """
        target = batch.multi_hot[Domain.MED]
        y = context.probabilities
        own = batch.rows >= 0
        index = self.index()
        components = {
            'bce': bce_loss(target, y),
            'multi': multilabel_margin_loss(target, y),
            'ddi': ddi_loss(y, self.ddi),
            'align': alignment_loss(
                context.health[own], context.v_med[own], index.keys[batch.rows[own]],
                index.values[batch.rows[own]], self.config.temperature
            ),
            'orth': (
                orthogonality_loss(context.v_hist, context.v_sim)
                if self.config.uses_similar and not self.config.no_hist else y.new_zeros(())
            ),
        }
        return total_loss(components, self.config.weights), {k: float(v) for k, v in components.items()}


def _jaccard(truth, predicted):
    union = truth | predicted
    return len(truth & predicted) / len(union) if union else 1.0


@torch.no_grad()
def predict_corpus(model, patients, batch_size=None, cold_start=False):
    """
    Score every visit of `patients`; with `cold_start` only first visits are kept.

    :returns: list of PatientPrediction
    """
    model.eval()
    batch_size = batch_size or model.config.batch_size
    threshold = model.config.threshold
    predictions = []
    for start in range(0, len(patients), batch_size):
        chunk = patients[start:start + batch_size]
        batch = model.batch(chunk)
        context = model(batch)
        probabilities = context.probabilities.cpu().numpy()
        gates = context.alpha.cpu().numpy()
        offset = 0
        for patient in chunk:
            count = len(patient.visits)
            positions = [0] if cold_start else list(range(count))
            probs = probabilities[offset:offset + count][positions]
            predictions.append(PatientPrediction(
                patient_id=patient.patient_id,
                positions=positions,
                truth=[patient.visits[t].med for t in positions],
                predicted=[select(p, threshold) for p in probs],
                probabilities=probs,
                gates=gates[offset:offset + count][positions]
            ))
            offset += count
    return predictions


def mean_jaccard(predictions):
    per_patient = [np.mean([_jaccard(t, p) for t, p in zip(r.truth, r.predicted)]) for r in predictions if r.truth]
    return float(np.mean(per_patient)) if per_patient else 0.0


def train_simmr(corpus, pretrained, config, dim=64, ddi=None, quiet=True):
    """
    Fit the recommender on the training split; keep the epoch with the best validation Jaccard.

    :param corpus: EHRCorpus with splits
    :param pretrained: PretrainedEmbeddings, or None for random initialisation
    :param config: SimMRConfig
    :param dim: embedding width when nothing is pretrained
    :param ddi: DDIMatrix
    """
    config.validate()
    torch.manual_seed(config.seed)
    dim = pretrained.dim if pretrained is not None else dim
    model = SimMR.from_corpus(corpus, config, dim, pretrained, ddi)
    train = list(corpus.patients_in('train'))
    monitor = list(corpus.patients_in('val')) or train
    if not train:
        raise InputError('training split is empty')

    parameters = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(parameters, lr=config.learning_rate, weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    best_score, best_state = -1.0, copy.deepcopy(model.state_dict())
    for epoch in tqdm(range(1, config.epochs + 1), desc='SimMR', disable=quiet):
        model.train()
        order = rng.permutation(len(train))
        running = []
        for start in range(0, len(train), config.batch_size):
            chunk = [train[i] for i in order[start:start + config.batch_size]]
            batch = model.batch(chunk)
            loss, parts = model.loss(batch, model(batch))
            if not torch.isfinite(loss):
                raise NumericFailure('recommender loss diverged', epoch=epoch, batch=start // config.batch_size,
                                     **{k: round(v, 4) for k, v in parts.items()})
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            running.append(float(loss))

        score = mean_jaccard(predict_corpus(model, monitor))
        model.history.append(score)
        logger.info('SimMR epoch %d loss %.4f val jaccard %.4f', epoch, float(np.mean(running)), score)
        if score > best_score:
            best_score, best_state = score, copy.deepcopy(model.state_dict())
    model.load_state_dict(best_state)
    model.eval()
    return model


@torch.no_grad()
def recommend(model, patient_history, current_diag, current_proc, patient_id=None):
    """
    Medication probabilities and selection for the current visit.

    Current medications are never read; the current visit enters with an empty medication set.

    :param model: trained SimMR
    :param patient_history: previous Visits, oldest first
    :param current_diag: diagnosis indices
    :param current_proc: procedure indices
    :param patient_id: excludes this patient's later training visits from retrieval
    """
    current = Visit(current_diag, current_proc, frozenset())
    record = PatientRecord(patient_id if patient_id is not None else '<query>', list(patient_history) + [current])
    model.eval()
    batch = model.batch([record])
    if patient_id is None:
        batch.owners = [(None, t) for _, t in batch.owners]
        batch.rows = torch.full_like(batch.rows, -1)
    context = model(batch)
    probabilities = context.probabilities[-1].cpu().numpy()
    selected = select(probabilities, model.config.threshold)
    codes = model.vocabularies[Domain.MED].decode(selected) if model.vocabularies else tuple(sorted(selected))
    alpha = context.alpha[-1].cpu().numpy()
    logger.debug('recommend %s visit %d: alpha_hist %.3f alpha_sim %.3f', record.patient_id,
                 len(patient_history), alpha[0], alpha[1])
    return Recommendation(
        patient_id=record.patient_id,
        visit_index=len(patient_history),
        probabilities=probabilities,
        selected=selected,
        selected_codes=codes,
        alpha_hist=float(alpha[0]),
        alpha_sim=float(alpha[1])
    )


def save_recommender(model, path, provenance=None):
    """
    :param model: SimMR
    :param path: usually `simmr.ckpt`
    :param provenance: config_digest, corpus_digest, medrep_digest
    """
    config = asdict(model.config)
    payload = {
        'format_version': RECOMMENDER_FORMAT_VERSION,
        'config': config,
        'dim': model.dim,
        'sizes': {d.value: n for d, n in model.sizes.items()},
        'visit_ref': [[p, int(t)] for p, t in model.visit_ref],
        'vocabularies': {d.value: list(v.codes) for d, v in (model.vocabularies or {}).items()},
        'history': list(model.history),
        'provenance': dict(provenance or {}),
        'state_dict': model.state_dict()
    }
    try:
        torch.save(payload, path)
    except OSError as ex:
        raise ArtifactIOError('could not write recommender checkpoint', path=str(path)) from ex
    return path


def read_provenance(path):
    return _read_payload(path)['provenance']


def _read_payload(path):
    try:
        payload = torch.load(path, map_location='cpu', weights_only=True)
    except (OSError, RuntimeError) as ex:
        raise ArtifactIOError('could not read recommender checkpoint', path=str(path)) from ex
    if payload.get('format_version') != RECOMMENDER_FORMAT_VERSION:
        raise ArtifactIOError('unsupported recommender checkpoint version', path=str(path))
    return payload


def load_recommender(path, corpus=None, **overrides):
    """
    Restore a checkpoint; `corpus`, when given, must have the same vocabulary sizes.

    :param overrides: SimMRConfig fields to change for inference (top_n, threshold, ...)
    """
    payload = _read_payload(path)
    stored = dict(payload['config'])
    weights = LossWeights(**stored.pop('weights'))
    config = SimMRConfig(weights=weights, **stored)
    for name, value in overrides.items():
        if value is not None:
            setattr(config, name, value)
    sizes = {Domain(d): n for d, n in payload['sizes'].items()}
    if corpus is not None:
        for domain in DOMAINS:
            if len(corpus.vocab(domain)) != sizes[domain]:
                raise DimensionError('checkpoint vocabulary differs from corpus', domain=domain.value,
                                     expected=sizes[domain], found=len(corpus.vocab(domain)))
    vocabularies = {
        Domain(d): CodeVocabulary(Domain(d), codes) for d, codes in payload['vocabularies'].items()
    } or None
    model = SimMR(sizes, [tuple(ref) for ref in payload['visit_ref']], payload['dim'], config, None, vocabularies)
    model.load_state_dict(payload['state_dict'])
    model.history = list(payload['history'])
    model.provenance = payload['provenance']
    model.eval()
    return model


def recommend_codes(model, patient_id, history, current):
    """
    `recommend` for code strings, as read from request files and HTTP payloads.

    :param history: list of {diag, proc, med} code lists
    :param current: {diag, proc} code lists
    """
    if not model.vocabularies:
        raise InputError('checkpoint carries no vocabularies to encode codes with')
    if not isinstance(history, list) or not all(isinstance(v, dict) for v in history) or not isinstance(current, dict):
        raise InputError('history must be a list of visits and current a visit object', patient_id=patient_id)
    vocab = model.vocabularies
    past = [Visit(*(vocab[d].encode(visit.get(d.value, [])) for d in DOMAINS)) for visit in history]
    return recommend(
        model, past, vocab[Domain.DIAG].encode(current.get('diag', [])),
        vocab[Domain.PROC].encode(current.get('proc', [])), patient_id
    )
