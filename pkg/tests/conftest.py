"""Shared fixtures: small studied models that build in well under a second."""

import pytest

from orcea import scene, study


def small_model(kind="UprightRect", n=40, k_ee=2, k_ae=1, seed=3, quality="high"):
    spec = scene.default_spec(kind)
    box = scene.FeatureBox.for_spec(spec)
    obs = study.collect(spec, n, scene.quality_preset(quality), seed, box=box)
    cfg = study.StudyConfig(k_ee=k_ee, k_ae=k_ae, restarts=1, max_iters=100, seed=seed)
    return study.build(obs, cfg)


@pytest.fixture(scope="session")
def tiny_rect():
    return small_model()


@pytest.fixture(scope="session")
def rect8():
    return small_model(n=80, k_ee=8, k_ae=4)


@pytest.fixture(scope="session")
def tiny_grid():
    return small_model("Grid4x4", n=40, k_ee=3, k_ae=1)


# One line per acceptance criterion, filled by test_acceptance and echoed
# after the run so the verdicts stay visible even when output is captured.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":").split(".")[0])):
            terminalreporter.write_line(line)
