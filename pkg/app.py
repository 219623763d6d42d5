from flask import jsonify, request
from flask.cli import FlaskGroup

import commands  # noqa: F401  registers the pipeline subcommands on app.cli
from config import app
from errors import HyperEHRError
from forms import RecommendForm
from serializers import serialize_recommendation
from simmr import load_recommender, recommend_codes

_model = {}


def get_model():
    """
    Load the checkpoint named by `SIMMR_CKPT` once per process.
    """
    path = app.config.get('SIMMR_CKPT')
    if not path:
        return None
    if _model.get('path') != path:
        _model['model'] = load_recommender(path)
        _model['path'] = path
        app.logger.info('serving recommender from %s', path)
    return _model['model']


@app.route('/health')
def health():
    """
    Controller to report whether a model is loaded.
    """
    try:
        loaded = get_model() is not None
    except HyperEHRError as ex:
        app.logger.error('could not load recommender: %s', ex)
        loaded = False
    return jsonify({'status': 'ok', 'model_loaded': loaded, 'checkpoint': app.config.get('SIMMR_CKPT')})


@app.route('/recommend', methods=['POST'])
def recommend():
    """
    Controller to recommend medications for one patient's current visit.
    """
    form = RecommendForm.from_json(request.get_json(silent=True))
    if not form.validate():
        return jsonify({'error': 'invalid request', 'fields': form.errors}), 400
    model = get_model()
    if model is None:
        return jsonify({'error': 'no recommender checkpoint configured'}), 503
    history = [
        {'diag': entry.diag.data, 'proc': entry.proc.data, 'med': entry.med.data} for entry in form.history.entries
    ]
    current = {'diag': form.current.diag.data, 'proc': form.current.proc.data}
    recommendation = recommend_codes(model, form.patient_id.data or None, history, current)
    return jsonify(serialize_recommendation(recommendation))


@app.errorhandler(HyperEHRError)
def pipeline_error(error):
    """
    Pipeline error handler.

    :param error:
    """
    return jsonify({'error': str(error), 'type': type(error).__name__}), 400


@app.errorhandler(404)
def not_found_error(error):
    """
    404 error handler.

    :param error:
    """
    return jsonify({'error': 'not found'}), 404


@app.errorhandler(500)
def server_error(error):
    """
    500 error handler.

    :param error:
    """
    return jsonify({'error': 'internal server error'}), 500


cli = FlaskGroup(create_app=lambda: app)

if __name__ == '__main__':
    cli()
