import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from contextforest.dataset import Dataset, ImageRecord, ObjectBox, SynthConfig, synth_scenes
from contextforest.forest import TrainConfig, train_forest

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def box(cx=0.5, cy=0.5, w=0.2, h=0.2, app=(0.0,), comp=None):
    return ObjectBox(cx, cy, w, h, np.asarray(app, dtype=np.float64), comp)


def random_boxes(rng, n, d_app=4):
    return [
        ObjectBox(float(rng.random()), float(rng.random()), float(rng.uniform(0.02, 1.0)),
                  float(rng.uniform(0.02, 1.0)), rng.standard_normal(d_app), int(rng.integers(0, 5)))
        for _ in range(n)
    ]


SMALL_SYNTH = SynthConfig(num_scene_types=4, num_components=6, images_per_scene=30, d_glob=8, d_app=4,
                          noise_global=0.2, noise_app=0.05, seed=3)


@pytest.fixture(scope="session")
def small_synth():
    return synth_scenes(SMALL_SYNTH)


@pytest.fixture(scope="session")
def small_data(small_synth):
    return small_synth.dataset


@pytest.fixture(scope="session")
def small_forest(small_data):
    cfg = TrainConfig(num_trees=5, candidate_splits_per_node=50, min_images_per_leaf=2, max_depth=8, seed=11)
    return train_forest(small_data, "position", cfg, k_retrieval=10)


def dataset_of(images, d_glob, d_app):
    return Dataset(tuple(images), d_glob, d_app)


def image(i, phi, boxes=()):
    return ImageRecord(i, np.asarray(phi, dtype=np.float64), tuple(boxes))


# one summary line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
