import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ccreid.diffusion import Denoiser, TrainConfig, make_schedule, train_denoiser
from ccreid.synthdata import DatasetSpec, gen_dataset, one_hot

import acceptance_registry

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_dataset():
    return gen_dataset(DatasetSpec(subjects=4, clothes_per_subject=2, images_per_pair=2,
                                   test_subjects=3, seed=3))


@pytest.fixture(scope="session")
def default_dataset():
    return gen_dataset(DatasetSpec())


@pytest.fixture(scope="session")
def trained_toy(default_dataset):
    """Denoiser trained with the default recipe on the default benchmark (about half a minute)."""
    ds = default_dataset
    schedule = make_schedule()
    rng = np.random.default_rng(0)
    den = Denoiser(ds.image_shape, ds.n_clothes, rng=rng, schedule=schedule)
    losses = train_denoiser(den, ds.train.images, one_hot(ds.train.clothes, ds.n_clothes),
                            schedule, TrainConfig(), rng=rng)
    return ds, den, schedule, losses


def pytest_terminal_summary(terminalreporter):
    lines = acceptance_registry.summary_lines()
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
