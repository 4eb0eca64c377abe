from datetime import datetime

import hypothesis
import numpy as np
import pytest
from fastapi.testclient import TestClient
from sqlalchemy import create_engine
from sqlalchemy.orm import sessionmaker
from sqlalchemy.pool import StaticPool

from app import models  # noqa: F401
from app.api import deps
from app.core.numeric import SeededRng
from app.db.base import Base
from app.main import app
from app.schemas.config import RunConfig
from app.schemas.metrics import EpisodeSummary, GcdMetrics, GlobalUpdateSummary, TargetMetrics, TargetReport
from app.schemas.run import RunManifest

np.seterr(all="warn")

hypothesis.settings.register_profile("fast", max_examples=5)
hypothesis.settings.register_profile("ci", max_examples=50, deadline=None)
hypothesis.settings.load_profile("ci")


TINY_CONFIG = {
    "training": {
        "n_g": 2, "n_e": 2, "epochs_per_episode": 1, "batch_size": 16,
        "known_fraction": 0.5, "seed": 7,
    },
    "data": {
        "n_classes": 4, "dim": 4, "samples_per_class": 10, "pseudo_target_samples_per_class": 8,
        "validation_samples_per_class_per_domain": 5, "target_samples_per_class": 8,
        "n_train_domains": 2, "n_validation_domains": 1, "n_target_domains": 1, "target_novel_classes": 2,
    },
    "encoder": {"hidden_dim": 8, "embed_dim": 4},
    "evaluation": {"k_max": 8, "kmeans_max_iters": 30, "kmeans_n_init": 1},
}

TINY_TOML = """
[training]
n_g = 2
n_e = 2
epochs_per_episode = 1
batch_size = 16
known_fraction = 0.5
seed = 7

[data]
n_classes = 4
dim = 4
samples_per_class = 10
pseudo_target_samples_per_class = 8
validation_samples_per_class_per_domain = 5
target_samples_per_class = 8
n_train_domains = 2
n_validation_domains = 1
n_target_domains = 1
target_novel_classes = 2

[encoder]
hidden_dim = 8
embed_dim = 4

[evaluation]
k_max = 8
kmeans_max_iters = 30
kmeans_n_init = 1
"""


@pytest.fixture
def tiny_config() -> RunConfig:
    return RunConfig.model_validate(TINY_CONFIG)


@pytest.fixture
def tiny_config_file(tmp_path):
    path = tmp_path / "tiny.toml"
    path.write_text(TINY_TOML, encoding="utf-8")
    return path


@pytest.fixture
def rng() -> SeededRng:
    return SeededRng(1234)


@pytest.fixture
def db_session():
    engine = create_engine(
        "sqlite://", connect_args={"check_same_thread": False}, poolclass=StaticPool
    )
    Base.metadata.create_all(bind=engine)
    TestingSession = sessionmaker(autocommit=False, autoflush=False, bind=engine)
    db = TestingSession()
    try:
        yield db
    finally:
        db.close()
        Base.metadata.drop_all(bind=engine)


@pytest.fixture
def client(db_session):
    def override_get_db():
        yield db_session

    app.dependency_overrides[deps.get_db] = override_get_db
    try:
        yield TestClient(app)
    finally:
        app.dependency_overrides.clear()


def _metrics(all_, k=4):
    return GcdMetrics(
        all=all_, old=all_, new=all_, matched_permutation={0: 0}, n_old=2, n_new=2,
        correct_old=0, correct_new=0, k_used=k,
    )


@pytest.fixture
def make_manifest():
    def factory(run_id="abc123def456", strategy="weighted_ta", n_g=2, target_all=0.5):
        history = [
            GlobalUpdateSummary(
                global_index=g,
                strategy=strategy,
                weight_diff_l1=0.25 * g,
                sign_conflict=0.1,
                weights=[0.6, 0.4],
                episodes=[
                    EpisodeSummary(episode_index=0, domain_id="train-0", known_classes=[0, 1],
                                   valid=_metrics(0.75), weight=0.6),
                    EpisodeSummary(episode_index=1, domain_id="train-1", known_classes=[1, 2],
                                   aborted=True, abort_reason="loss is nan"),
                ],
            )
            for g in range(1, n_g + 1)
        ]
        report = TargetReport.from_domains([TargetMetrics(domain_id="target-0", metrics=_metrics(target_all))])
        return RunManifest(
            run_id=run_id, command="train", seed=7, strategy=strategy, config={"training": {"seed": 7}},
            versions={"package": "test"}, started_at=datetime(2026, 1, 1), wall_clock_seconds=1.5,
            history=history, target=report,
        )

    return factory
