"""`Settings` module: the declarative run configuration and its loader."""

import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from corpus import SynthConfig
from errors import ArtifactIOError, ConfigError
from forms import validate_run_config
from hypergraph import DropRates
from khge import EncoderConfig
from medrep import ContrastiveConfig
from simmr import LossWeights, SimMRConfig

logger = logging.getLogger(__name__)

SECTIONS = ('paths', 'synth', 'preprocess', 'encoder', 'pretrain', 'recommender', 'evaluate')
DROP_KEYS = ('node_drop', 'incidence_drop', 'feature_drop')
WEIGHT_KEYS = {'lambda_multi': 'multi', 'lambda_ddi': 'ddi', 'lambda_aux': 'aux'}


@dataclass
class Paths:
    output_dir: str = ''
    raw_dir: str = ''
    corpus_dir: str = ''
    ddi: str = ''
    hierarchy_diag: str = ''
    hierarchy_proc: str = ''
    hierarchy_med: str = ''

    def __post_init__(self):
        if not self.output_dir:
            self.output_dir = os.environ.get('HYPEREHR_OUT', 'out')

    @property
    def out(self):
        return Path(self.output_dir)

    @property
    def raw(self):
        return Path(self.raw_dir) if self.raw_dir else self.out / 'raw'

    @property
    def corpus(self):
        return Path(self.corpus_dir) if self.corpus_dir else self.out / 'corpus'

    @property
    def ddi_edges(self):
        return Path(self.ddi) if self.ddi else self.raw / 'ddi.edges'

    def hierarchy(self, domain):
        given = getattr(self, f'hierarchy_{domain.value}')
        return Path(given) if given else self.raw / f'hierarchy.{domain.value}.edges'

    @property
    def medrep(self):
        return self.out / 'medrep.ckpt'

    def encoder(self, domain):
        return self.out / f'khge.{domain.value}.pt'

    @property
    def simmr(self):
        return self.out / 'simmr.ckpt'


@dataclass
class PreprocessConfig:
    min_code_freq: int = 1
    min_visits: int = 2
    until_stable: bool = False
    resplit: bool = False


@dataclass
class EvaluateConfig:
    rounds: int = 10
    fraction: float = 0.8
    replace: bool = True
    cold_start: bool = False


@dataclass
class Ablations:
    no_sim: bool = False
    no_hist: bool = False
    medrep_none: bool = False
    medrep_fixed: bool = False
    no_knowledge_bias: bool = False


@dataclass
class RunConfig:
    paths: Paths = field(default_factory=Paths)
    synth: SynthConfig = field(default_factory=SynthConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    pretrain: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    recommender: SimMRConfig = field(default_factory=SimMRConfig)
    evaluate: EvaluateConfig = field(default_factory=EvaluateConfig)
    ablations: Ablations = field(default_factory=Ablations)
    seed: int = 42

    def resolve(self):
        """Push the run seed and ablation flags into the stage configs."""
        self.synth.seed = self.pretrain.seed = self.recommender.seed = self.seed
        self.recommender.no_sim = self.recommender.no_sim or self.ablations.no_sim
        self.recommender.no_hist = self.recommender.no_hist or self.ablations.no_hist
        if self.ablations.medrep_fixed:
            self.recommender.freeze_embeddings = True
        if self.ablations.no_knowledge_bias:
            self.encoder.knowledge_bias = False
        if self.ablations.medrep_none and self.ablations.medrep_fixed:
            raise ConfigError('medrep_none and medrep_fixed are exclusive')
        return self

    def canonical(self):
        data = asdict(self)
        # paths move artifacts around without changing what is computed
        data.pop('paths')
        return json.dumps(data, sort_keys=True, default=list)

    def digest(self):
        return hashlib.sha256(self.canonical().encode('utf-8')).hexdigest()


def _build(cls, section, values):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError('unknown configuration keys', section=section, keys=','.join(unknown))
    return cls(**values)


def _pretrain(values):
    values = dict(values)
    rates = DropRates(**{key: values.pop(key) for key in DROP_KEYS if key in values})
    return _build(ContrastiveConfig, 'pretrain', dict(values, rates=rates))


def _recommender(values):
    values = dict(values)
    weights = LossWeights(**{WEIGHT_KEYS[key]: values.pop(key) for key in list(values) if key in WEIGHT_KEYS})
    return _build(SimMRConfig, 'recommender', dict(values, weights=weights))


def read_toml(path):
    try:
        with open(path, 'rb') as handle:
            return tomllib.load(handle)
    except OSError as ex:
        raise ArtifactIOError('could not read config file', path=str(path)) from ex
    except tomllib.TOMLDecodeError as ex:
        raise ConfigError('config file is not valid TOML', path=str(path), reason=str(ex)) from ex


def load_run_config(path=None, **overrides):
    """
    Read a TOML run configuration and apply command-line overrides.

    Overrides set to None are ignored. Recognised overrides: `seed`, `output_dir`, the
    ablation flags, `freeze_embeddings`, `top_n`, `window`, `cold_start`,
    `resample_views` and `resplit`.

    :param path: TOML file or None for defaults
    """
    raw = read_toml(path) if path else {}
    unknown = sorted(set(raw) - set(SECTIONS) - {'seed'})
    if unknown:
        raise ConfigError('unknown configuration sections', sections=','.join(unknown))

    paths = _build(Paths, 'paths', raw.get('paths', {}))
    synth = dict(raw.get('synth', {}))
    if 'split_ratios' in synth:
        synth['split_ratios'] = tuple(synth['split_ratios'])
    config = RunConfig(
        paths=paths,
        synth=_build(SynthConfig, 'synth', synth),
        preprocess=_build(PreprocessConfig, 'preprocess', raw.get('preprocess', {})),
        encoder=_build(EncoderConfig, 'encoder', raw.get('encoder', {})),
        pretrain=_pretrain(raw.get('pretrain', {})),
        recommender=_recommender(raw.get('recommender', {})),
        evaluate=_build(EvaluateConfig, 'evaluate', raw.get('evaluate', {})),
        seed=raw.get('seed', 42)
    )

    targets = {
        'seed': (config, 'seed'),
        'output_dir': (config.paths, 'output_dir'),
        'top_n': (config.recommender, 'top_n'),
        'window': (config.recommender, 'window'),
        'freeze_embeddings': (config.recommender, 'freeze_embeddings'),
        'cold_start': (config.evaluate, 'cold_start'),
        'resample_views': (config.pretrain, 'resample_views'),
        'resplit': (config.preprocess, 'resplit'),
    }
    targets.update({name: (config.ablations, name) for name in asdict(config.ablations)})
    for name, value in overrides.items():
        if value is None:
            continue
        if name not in targets:
            raise ConfigError('unknown override', override=name)
        target, attr = targets[name]
        setattr(target, attr, value)

    config.resolve()
    validate_run_config(config)
    for stage in (config.synth, config.encoder, config.pretrain, config.recommender):
        stage.validate()
    logger.info('run config %s (seed %d)', config.digest()[:12], config.seed)
    return config
