"""`Models` module for the `HyperEHR` run registry"""

from datetime import datetime

from config import db
from errors import LineageError

DATETIME_FORMAT = '%b %d %Y %H:%M:%S'
ARTIFACT_KINDS = ('corpus', 'medrep', 'simmr', 'report', 'recommendations', 'gates')


class Run(db.Model):
    __tablename__ = 'Run'

    id = db.Column(db.Integer, primary_key=True)
    command = db.Column(db.String(32), nullable=False)
    config_digest = db.Column(db.String(64))
    seed = db.Column(db.Integer)
    status = db.Column(db.String(16), default='running', nullable=False)
    started = db.Column(db.DateTime, default=datetime.now, nullable=False)
    finished = db.Column(db.DateTime, nullable=True)
    message = db.Column(db.Text, nullable=True)

    artifacts = db.relationship('Artifact', backref='run', lazy=True)

    def __repr__(self):
        return f'<Run {self.id} {self.command} {self.status}>'

    def finish(self, status='succeeded', message=None):
        self.status = status
        self.message = message
        self.finished = datetime.now()

    @property
    def summary(self):
        return {
            'id': self.id,
            'command': self.command,
            'status': self.status,
            'seed': self.seed,
            'config_digest': (self.config_digest or '')[:12],
            'started': self.started.strftime(DATETIME_FORMAT),
            'artifacts': [artifact.kind for artifact in self.artifacts],
            'message': self.message
        }


class Artifact(db.Model):
    __tablename__ = 'Artifact'

    id = db.Column(db.Integer, primary_key=True)
    kind = db.Column(db.String(32), nullable=False)
    path = db.Column(db.String(500), nullable=False)
    digest = db.Column(db.String(64), nullable=False, index=True)
    parent_digest = db.Column(db.String(64), nullable=True)
    run_id = db.Column(db.Integer, db.ForeignKey('Run.id'), nullable=False)

    def __repr__(self):
        return f'<Artifact {self.id} {self.kind} {self.digest[:12]}>'

    @property
    def parent(self):
        """Latest artifact recorded before this one with the parent digest."""
        if not self.parent_digest:
            return None
        return Artifact.query.filter(
            Artifact.digest == self.parent_digest, Artifact.id < self.id
        ).order_by(Artifact.id.desc()).first()

    @property
    def lineage(self):
        """Artifacts from this one back to the corpus it descends from."""
        chain, node = [], self
        while node is not None:
            chain.append(node)
            if node.parent_digest and node.parent is None:
                raise LineageError('artifact parent is not registered', kind=node.kind,
                                   parent=node.parent_digest)
            node = node.parent
        return chain


def start_run(command, config=None):
    db.create_all()
    run = Run(
        command=command,
        config_digest=config.digest() if config is not None else None,
        seed=config.seed if config is not None else None
    )
    db.session.add(run)
    db.session.commit()
    return run


def record_artifact(run, kind, path, digest, parent_digest=None):
    if kind not in ARTIFACT_KINDS:
        raise ValueError(f'unknown artifact kind {kind}')
    artifact = Artifact(kind=kind, path=str(path), digest=digest, parent_digest=parent_digest, run=run)
    db.session.add(artifact)
    db.session.commit()
    return artifact
