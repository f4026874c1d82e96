import os

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=25, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", max_examples=100, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("quick", max_examples=5, deadline=None)
settings.load_profile(os.getenv("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    """Run inside a scratch directory so default output paths stay out of the repo."""
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("REID_OUTPUT_DIR", raising=False)
    return tmp_path


TINY_SCHEDULE = {"warmup_epochs": 0, "lr_start": 1e-3, "lr_peak": 1e-3, "milestones": []}

TINY_SECTIONS = {
    "model": {"image_height": 16, "image_width": 8, "depth": 1, "heads": 2, "dim": 16},
    "sgt": {"layers": 1, "heads": 2, "dim": 16, "pe_dim": 2},
    "data": {"num_identities": 4, "tracklets_per_identity": 4, "frames": 2, "holdout_tracklets": 2,
             "image_height": 16, "image_width": 8},
    "stage1": {"epochs": 1, "batch_size": 4, "frames": 2, "schedule": TINY_SCHEDULE},
    "stage2": {"epochs": 1, "p": 2, "k": 2, "frames": 2, "schedule": TINY_SCHEDULE},
    "eval": {"frames": 2},
}


@pytest.fixture
def tiny_sections():
    """Config sections for a model small enough to train in a unit test."""
    return {name: dict(values) for name, values in TINY_SECTIONS.items()}


@pytest.fixture
def tiny_config(tiny_sections):
    from src.config import ExperimentConfig, merge

    def build(**sections):
        values = {name: {**tiny_sections[name], **sections.get(name, {})} for name in tiny_sections}
        return merge(ExperimentConfig(), values).validate()
    return build
