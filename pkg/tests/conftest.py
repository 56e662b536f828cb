import sys
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile(
    "repo", max_examples=25, deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("repo")


@pytest.fixture(scope="session")
def small_spec():
    from splattrace.scene import SceneSpec

    return SceneSpec(n_objects=4, disks_per_side=10, image_size=(40, 40), n_views=4,
                     n_holdout_views=2, seed=3)


@pytest.fixture(scope="session")
def small_scene(small_spec):
    from splattrace.scene import generate_scene

    return generate_scene(small_spec)


@pytest.fixture(scope="session")
def small_gt(small_scene):
    from splattrace.raster import render_gt_instance_map

    return [render_gt_instance_map(small_scene, v) for v in small_scene.views]


# criterion number -> (passed, detail), filled by test_acceptance
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
