import logging
from dataclasses import asdict
from types import SimpleNamespace

from flask_wtf import FlaskForm
from wtforms import BooleanField, FieldList, FloatField, Form, FormField, IntegerField, StringField
from wtforms.validators import AnyOf, NumberRange, Optional, ValidationError

from errors import ConfigError

logger = logging.getLogger(__name__)


def positive(form, field):
    if field.data is None or field.data <= 0:
        raise ValidationError('must be positive')


def below_one(form, field):
    if field.data is None or not 0 <= field.data < 1:
        raise ValidationError('must lie in [0, 1)')


def unit_interval(form, field):
    if field.data is None or not 0 <= field.data <= 1:
        raise ValidationError('must lie in [0, 1]')


class SynthForm(Form):
    num_diag = IntegerField('num_diag', validators=[NumberRange(min=1)])
    num_proc = IntegerField('num_proc', validators=[NumberRange(min=0)])
    num_med = IntegerField('num_med', validators=[NumberRange(min=1)])
    num_patients = IntegerField('num_patients', validators=[NumberRange(min=1)])
    num_clusters = IntegerField('num_clusters', validators=[NumberRange(min=1)])
    mean_visits = FloatField('mean_visits', validators=[positive])
    noise = FloatField('noise', validators=[unit_interval])
    persistence = FloatField('persistence', validators=[unit_interval])
    ddi_density = FloatField('ddi_density', validators=[unit_interval])
    split_ratios = FieldList(FloatField('ratio'))

    def validate_split_ratios(form, field):
        ratios = [r for r in field.data if r is not None]
        if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-6:
            raise ValidationError('train/val/test ratios must be non-negative and sum to 1')


class PreprocessForm(Form):
    min_code_freq = IntegerField('min_code_freq', validators=[NumberRange(min=1)])
    min_visits = IntegerField('min_visits', validators=[NumberRange(min=2)])


class EncoderForm(Form):
    dim = IntegerField('dim', validators=[NumberRange(min=1)])
    layers = IntegerField('layers', validators=[NumberRange(min=1)])
    heads = IntegerField('heads', validators=[NumberRange(min=1)])
    max_path_distance = IntegerField('max_path_distance', validators=[NumberRange(min=0)])
    dropout = FloatField('dropout', validators=[below_one])

    def validate_heads(form, field):
        if field.data and form.dim.data and form.dim.data % field.data:
            raise ValidationError('dim must be divisible by heads')


class PretrainForm(Form):
    temperature = FloatField('temperature', validators=[positive])
    lambda_edge = FloatField('lambda_edge', validators=[NumberRange(min=0)])
    lambda_membership = FloatField('lambda_membership', validators=[NumberRange(min=0)])
    epochs = IntegerField('epochs', validators=[NumberRange(min=0)])
    learning_rate = FloatField('learning_rate', validators=[positive])
    weight_decay = FloatField('weight_decay', validators=[NumberRange(min=0)])
    node_drop = FloatField('node_drop', validators=[below_one])
    incidence_drop = FloatField('incidence_drop', validators=[below_one])
    feature_drop = FloatField('feature_drop', validators=[below_one])


class RecommenderForm(Form):
    window = IntegerField('window', validators=[NumberRange(min=0)])
    top_n = IntegerField('top_n', validators=[NumberRange(min=0)])
    threshold = FloatField('threshold', validators=[unit_interval])
    temperature = FloatField('temperature', validators=[positive])
    lambda_multi = FloatField('lambda_multi', validators=[NumberRange(min=0)])
    lambda_ddi = FloatField('lambda_ddi', validators=[NumberRange(min=0)])
    lambda_aux = FloatField('lambda_aux', validators=[NumberRange(min=0)])
    learning_rate = FloatField('learning_rate', validators=[positive])
    weight_decay = FloatField('weight_decay', validators=[NumberRange(min=0)])
    dropout = FloatField('dropout', validators=[below_one])
    epochs = IntegerField('epochs', validators=[NumberRange(min=0)])
    batch_size = IntegerField('batch_size', validators=[NumberRange(min=1)])
    heads = IntegerField('heads', validators=[NumberRange(min=1)])
    no_sim = BooleanField('no_sim')
    no_hist = BooleanField('no_hist')

    def validate_no_hist(form, field):
        if field.data and form.no_sim.data:
            raise ValidationError('no_sim and no_hist together leave no channel')


class EvaluateForm(Form):
    rounds = IntegerField('rounds', validators=[NumberRange(min=1)])
    fraction = FloatField('fraction', validators=[positive, NumberRange(max=1)])


class SearchSpaceForm(Form):
    """Ranges explored by the hyperparameter search; leaving them only warns."""
    learning_rate = FloatField('learning_rate', validators=[NumberRange(min=1e-4, max=5e-3)])
    dropout = FloatField('dropout', validators=[NumberRange(min=0, max=0.5)])
    lambda_multi = FloatField('lambda_multi', validators=[NumberRange(min=1e-6, max=1)])
    lambda_ddi = FloatField('lambda_ddi', validators=[NumberRange(min=1e-6, max=1)])
    lambda_aux = FloatField('lambda_aux', validators=[NumberRange(min=1e-6, max=1)])
    pretrain_learning_rate = FloatField('pretrain_learning_rate', validators=[AnyOf([1e-3, 5e-4])])
    pretrain_weight_decay = FloatField('pretrain_weight_decay', validators=[AnyOf([1e-4, 1e-5])])
    pretrain_epochs = IntegerField('pretrain_epochs', validators=[AnyOf([150, 300, 500, 1500, 3000])])
    layers = IntegerField('layers', validators=[AnyOf([1, 2, 4])])


def _errors(form):
    return '; '.join(f'{name}: {messages[0]}' for name, messages in sorted(form.errors.items()))


def check_section(form_class, section, data):
    """Hard constraints: any failure is a ConfigError naming the section."""
    form = form_class(data=data)
    if not form.validate():
        raise ConfigError('invalid configuration', section=section, errors=_errors(form))
    return form


def check_search_space(config):
    """Log a warning for every hyperparameter outside the searched ranges; return the offenders."""
    weights = config.recommender.weights
    form = SearchSpaceForm(data={
        'learning_rate': config.recommender.learning_rate,
        'dropout': config.recommender.dropout,
        'lambda_multi': weights.multi,
        'lambda_ddi': weights.ddi,
        'lambda_aux': weights.aux,
        'pretrain_learning_rate': config.pretrain.learning_rate,
        'pretrain_weight_decay': config.pretrain.weight_decay,
        'pretrain_epochs': config.pretrain.epochs,
        'layers': config.encoder.layers,
    })
    if form.validate():
        return {}
    for name, messages in sorted(form.errors.items()):
        logger.warning('%s=%s is outside the searched range: %s', name, form[name].data, messages[0])
    return form.errors


def validate_run_config(config):
    """
    Two-tier check of a RunConfig.

    :param config: settings.RunConfig
    """
    rates = asdict(config.pretrain.rates)
    weights = config.recommender.weights
    check_section(SynthForm, 'synth', asdict(config.synth))
    check_section(PreprocessForm, 'preprocess', asdict(config.preprocess))
    check_section(EncoderForm, 'encoder', asdict(config.encoder))
    check_section(PretrainForm, 'pretrain', dict(asdict(config.pretrain), **rates))
    check_section(RecommenderForm, 'recommender', dict(
        asdict(config.recommender), lambda_multi=weights.multi, lambda_ddi=weights.ddi, lambda_aux=weights.aux
    ))
    check_section(EvaluateForm, 'evaluate', asdict(config.evaluate))
    return check_search_space(config)


class VisitForm(Form):
    diag = FieldList(StringField('code'))
    proc = FieldList(StringField('code'))
    med = FieldList(StringField('code'))


class CurrentVisitForm(Form):
    diag = FieldList(StringField('code'))
    proc = FieldList(StringField('code'))

    def validate_diag(form, field):
        if not [code for code in field.data if code]:
            raise ValidationError('the current visit needs at least one diagnosis')


class RecommendForm(FlaskForm):
    class Meta:
        csrf = False

    patient_id = StringField('patient_id', validators=[Optional()])
    history = FieldList(FormField(VisitForm))
    current = FormField(CurrentVisitForm)

    @classmethod
    def from_json(cls, payload):
        """
        Bind a decoded JSON request body.

        :param payload: {patient_id, history: [{diag, proc, med}], current: {diag, proc}}
        """
        if not isinstance(payload, dict):
            payload = {}

        def codes(visit, name):
            values = visit.get(name, []) if isinstance(visit, dict) else []
            return [str(code) for code in values] if isinstance(values, list) else []

        history = payload.get('history') if isinstance(payload.get('history'), list) else []
        current = payload.get('current') if isinstance(payload.get('current'), dict) else {}
        return cls(formdata=None, data={
            'patient_id': None if payload.get('patient_id') is None else str(payload['patient_id']),
            'history': [
                SimpleNamespace(diag=codes(v, 'diag'), proc=codes(v, 'proc'), med=codes(v, 'med')) for v in history
            ],
            'current': SimpleNamespace(diag=codes(current, 'diag'), proc=codes(current, 'proc')),
        })
