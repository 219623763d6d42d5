"""Knowledge-aware hypergraph encoder.

Each layer runs local node/hyperedge message passing and hierarchy-biased global
attention over all nodes, fuses the two node streams with a residual feed-forward
block, and the encoder averages the per-layer outputs.
"""

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from errors import ArtifactIOError, ConfigError, NumericFailure

ENCODER_FORMAT_VERSION = 1


@dataclass
class EncoderConfig:
    dim: int = 64
    layers: int = 2
    heads: int = 4
    max_path_distance: int = 8
    dropout: float = 0.0
    post_norm: bool = True
    knowledge_bias: bool = True

    @property
    def bias_bucket_count(self):
        # distances past the cap share the last bucket
        return self.max_path_distance + 1

    def validate(self):
        if self.layers < 1:
            raise ConfigError('encoder needs at least one layer', layers=self.layers)
        if self.heads < 1 or self.dim % self.heads:
            raise ConfigError('dim must be divisible by heads', dim=self.dim, heads=self.heads)
        if self.max_path_distance < 0:
            raise ConfigError('max_path_distance must be non-negative')
        return self


@dataclass
class EmbeddingSpace:
    Z: torch.Tensor
    U: torch.Tensor
    node_layers: list = field(default_factory=list)
    edge_layers: list = field(default_factory=list)
    node_mask: torch.Tensor = None
    edge_mask: torch.Tensor = None


def tree_distances(hierarchy, vocab):
    """
    Path length between every pair of vocabulary codes through their lowest common ancestor.

    :param hierarchy: CodeHierarchy, or None for a flat tree under the root
    :param vocab: CodeVocabulary
    """
    size = len(vocab)
    if hierarchy is None:
        return 2 * (1 - np.eye(size, dtype=np.int64))
    paths = [list(reversed(hierarchy.ancestors(code))) for code in vocab.codes]
    depth = np.array([len(p) for p in paths], dtype=np.int64)
    levels = int(depth.max()) if size else 0
    ids = {}
    ancestors = np.full((size, levels), -1, dtype=np.int64)
    for i, path in enumerate(paths):
        for level, node in enumerate(path):
            ancestors[i, level] = ids.setdefault(node, len(ids))

    shared = np.zeros((size, size), dtype=np.int64)
    still_same = np.ones((size, size), dtype=bool)
    for level in range(levels):
        column = ancestors[:, level]
        still_same &= (column[:, None] == column[None, :]) & (column[:, None] >= 0)
        shared += still_same
    return depth[:, None] + depth[None, :] - 2 * shared


class KnowledgeBias(nn.Module):
    """One learnable scalar per head and per clipped path-distance bucket."""

    def __init__(self, distance, heads, max_path_distance):
        super().__init__()
        clipped = np.minimum(np.asarray(distance), max_path_distance)
        self.register_buffer('distance', torch.as_tensor(clipped, dtype=torch.long))
        self.bucket_bias = nn.Parameter(torch.zeros(heads, max_path_distance + 1))

    def forward(self):
        return self.bucket_bias[:, self.distance]


def build_knowledge_bias(hierarchy, vocab, config):
    return KnowledgeBias(tree_distances(hierarchy, vocab), config.heads, config.max_path_distance)


def additive_scores(weight, messages, targets, negative_slope=0.2):
    """Attention logits for (message, target) pairs; swap this for another scoring form."""
    return F.leaky_relu(torch.cat([messages, targets], dim=-1) @ weight, negative_slope)


def segment_softmax(scores, index, size):
    """Softmax of `scores` within each group of equal `index`."""
    peak = torch.full((size,), float('-inf'), dtype=scores.dtype, device=scores.device)
    peak = peak.scatter_reduce(0, index, scores.detach(), reduce='amax', include_self=True)
    weights = torch.exp(scores - peak[index])
    total = torch.zeros(size, dtype=scores.dtype, device=scores.device).index_add(0, index, weights)
    return weights / total[index]


class LMPNLayer(nn.Module):
    """
    Local message passing: nodes -> hyperedges, then fresh hyperedges -> nodes.

    Each direction has its own transform and attention vector; attention is
    normalised over each hyperedge's (resp. node's) surviving neighbourhood.
    """

    def __init__(self, dim):
        super().__init__()
        self.node_to_edge = nn.Linear(dim, dim)
        self.edge_to_node = nn.Linear(dim, dim)
        self.edge_attention = nn.Parameter(torch.empty(2 * dim).normal_(0.0, 0.1))
        self.node_attention = nn.Parameter(torch.empty(2 * dim).normal_(0.0, 0.1))

    def edge_weights(self, z, u, nodes, edges):
        messages = self.node_to_edge(z)[nodes]
        return segment_softmax(additive_scores(self.edge_attention, messages, u[edges]), edges, u.shape[0]), messages

    def forward(self, z, u, nodes, edges):
        alpha, messages = self.edge_weights(z, u, nodes, edges)
        u_next = torch.zeros_like(u).index_add(0, edges, alpha[:, None] * messages)

        back = self.edge_to_node(u_next)[edges]
        beta = segment_softmax(additive_scores(self.node_attention, back, z[nodes]), nodes, z.shape[0])
        z_local = torch.zeros_like(z).index_add(0, nodes, beta[:, None] * back)
        return z_local, u_next


class KGANLayer(nn.Module):
    """Multi-head self-attention over all nodes with an additive hierarchy bias."""

    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.query = nn.Linear(dim, dim, bias=False)
        self.key = nn.Linear(dim, dim, bias=False)
        self.value = nn.Linear(dim, dim, bias=False)

    def _split(self, x):
        return x.view(x.shape[0], self.heads, x.shape[1] // self.heads).transpose(0, 1)

    def attention(self, z, bias=None):
        q, k = self._split(self.query(z)), self._split(self.key(z))
        logits = q @ k.transpose(-1, -2)
        if bias is not None:
            logits = logits + bias
        return torch.softmax(logits / math.sqrt(q.shape[-1]), dim=-1)

    def forward(self, z, bias=None):
        out = self.attention(z, bias) @ self._split(self.value(z))
        return out.transpose(0, 1).reshape(z.shape)


class FeedForwardFusion(nn.Module):
    def __init__(self, dim, dropout=0.0, post_norm=True):
        super().__init__()
        self.post_norm = post_norm
        self.ffn = nn.Sequential(
            nn.Linear(dim, 2 * dim), nn.ReLU(), nn.Dropout(dropout), nn.Linear(2 * dim, dim)
        )
        self.norm = nn.LayerNorm(dim)

    def forward(self, x):
        if self.post_norm:
            return self.norm(x + self.ffn(x))
        return x + self.ffn(self.norm(x))


class KHGELayer(nn.Module):
    def __init__(self, config):
        super().__init__()
        self.local = LMPNLayer(config.dim)
        self.glob = KGANLayer(config.dim, config.heads)
        self.fusion = FeedForwardFusion(config.dim, config.dropout, config.post_norm)

    def forward(self, z, u, nodes, edges, bias=None):
        z_local, u_next = self.local(z, u, nodes, edges)
        z_global = self.glob(z, bias)
        return self.fusion(z_local + z_global), u_next


class KHGE(nn.Module):
    """
    Encoder of one domain hypergraph.

    :param num_nodes: vocabulary size
    :param config: EncoderConfig
    :param knowledge_bias: KnowledgeBias or None
    """

    def __init__(self, num_nodes, config, knowledge_bias=None):
        super().__init__()
        config.validate()
        self.config = config
        self.num_nodes = num_nodes
        bound = 1.0 / math.sqrt(config.dim)
        self.embedding = nn.Parameter(torch.empty(num_nodes, config.dim).uniform_(-bound, bound))
        self.knowledge_bias = knowledge_bias if config.knowledge_bias else None
        self.layers = nn.ModuleList(KHGELayer(config) for _ in range(config.layers))
        self.forward_calls = 0

    def forward(self, view):
        """
        Encode one view of the hypergraph.

        :param view: AugmentedView
        """
        self.forward_calls += 1
        weight = self.embedding
        nodes, edges = (torch.as_tensor(a, device=weight.device) for a in view.incidence())
        num_edges = view.base.num_hyperedges

        z = weight * torch.as_tensor(view.feature_mask, dtype=weight.dtype, device=weight.device)
        counts = torch.zeros(num_edges, dtype=weight.dtype, device=weight.device).index_add(
            0, edges, torch.ones_like(edges, dtype=weight.dtype)
        )
        u = torch.zeros(num_edges, z.shape[1], dtype=weight.dtype, device=weight.device).index_add(0, edges, z[nodes])
        u = u / counts.clamp(min=1.0)[:, None]

        bias = self.knowledge_bias() if self.knowledge_bias is not None else None
        node_layers, edge_layers = [], []
        for k, layer in enumerate(self.layers, start=1):
            z, u = layer(z, u, nodes, edges, bias)
            if not (torch.isfinite(z).all() and torch.isfinite(u).all()):
                raise NumericFailure('non-finite encoder state', layer=k, domain=view.base.domain.value)
            node_layers.append(z)
            edge_layers.append(u)

        return EmbeddingSpace(
            Z=torch.stack(node_layers).mean(dim=0),
            U=torch.stack(edge_layers).mean(dim=0),
            node_layers=node_layers,
            edge_layers=edge_layers,
            node_mask=torch.as_tensor(view.kept_nodes, device=weight.device),
            edge_mask=torch.as_tensor(view.active_hyperedges, device=weight.device)
        )


def save_encoder(encoder, path):
    payload = {
        'format_version': ENCODER_FORMAT_VERSION,
        'config': asdict(encoder.config),
        'num_nodes': encoder.num_nodes,
        'has_knowledge_bias': encoder.knowledge_bias is not None,
        'state_dict': encoder.state_dict()
    }
    try:
        torch.save(payload, path)
    except OSError as ex:
        raise ArtifactIOError('could not write encoder checkpoint', path=str(path)) from ex
    return path


def load_encoder(path, config=None):
    """
    Restore an encoder; `config`, when given, must equal the stored one.

    :param path:
    :param config: expected EncoderConfig
    """
    try:
        payload = torch.load(path, map_location='cpu', weights_only=True)
    except OSError as ex:
        raise ArtifactIOError('could not read encoder checkpoint', path=str(path)) from ex
    if payload.get('format_version') != ENCODER_FORMAT_VERSION:
        raise ConfigError('unsupported encoder checkpoint version', version=payload.get('format_version'))
    stored = EncoderConfig(**payload['config'])
    if config is not None and asdict(config) != asdict(stored):
        raise ConfigError('encoder checkpoint was written with a different config', path=str(path))
    bias = None
    if payload['has_knowledge_bias']:
        size = payload['num_nodes']
        bias = KnowledgeBias(np.zeros((size, size), dtype=np.int64), stored.heads, stored.max_path_distance)
    encoder = KHGE(payload['num_nodes'], stored, bias)
    encoder.load_state_dict(payload['state_dict'])
    return encoder
