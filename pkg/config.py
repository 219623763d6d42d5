import logging
import os
from logging import FileHandler, Formatter

from flask import Flask
from flask_sqlalchemy import SQLAlchemy

SECRET_KEY = os.urandom(32)

DEBUG = False

OUTPUT_DIR = os.environ.get('HYPEREHR_OUT', os.path.join(os.getcwd(), 'out'))
SQLALCHEMY_DATABASE_URI = os.environ.get(
    'HYPEREHR_DATABASE_URL', 'sqlite:///' + os.path.join(os.path.abspath(OUTPUT_DIR), 'runs.db')
)
SQLALCHEMY_TRACK_MODIFICATIONS = False
LOG_FILE = 'hyperehr.log'
LOG_FORMAT = '%(asctime)s %(levelname)s: %(message)s [in %(pathname)s:%(lineno)d]'

# Checkpoint the HTTP surface serves; unset until a model is trained.
SIMMR_CKPT = os.environ.get('HYPEREHR_SIMMR_CKPT')

app = Flask(__name__)
app.config.from_object('config')
db = SQLAlchemy(app)

def attach_file_log(output_dir=None):
    """Send pipeline and app logs to `hyperehr.log` in the output directory."""
    output_dir = output_dir or app.config['OUTPUT_DIR']
    os.makedirs(output_dir, exist_ok=True)
    target = os.path.abspath(os.path.join(output_dir, LOG_FILE))
    root = logging.getLogger()
    if any(isinstance(h, FileHandler) and h.baseFilename == target for h in root.handlers):
        return target
    file_handler = FileHandler(target)
    file_handler.setFormatter(Formatter(LOG_FORMAT))
    file_handler.setLevel(logging.INFO)
    root.addHandler(file_handler)
    root.setLevel(logging.INFO)
    return target
