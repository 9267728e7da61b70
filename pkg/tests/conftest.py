import numpy as np
import pytest

from photodepth import synth
from photodepth.core import Rng, depth_to_disp, logit
from photodepth.optim import SceneState


def truth_state(scene, learn_intrinsics=False):
    """SceneState with every parameter at its ground-truth value."""
    target, supports = synth.scene_frames(scene)
    st = SceneState.initial(
        target.image,
        [(k, f.image) for k, f in supports.items()],
        camera=None if learn_intrinsics else scene.camera,
        learn_intrinsics=learn_intrinsics,
        poses=[scene.frames[k] for k in supports],
    )
    st.disparity.values[:] = logit(depth_to_disp(target.gt_depth)).ravel()
    return st, target


@pytest.fixture(scope="session")
def corner_scene():
    return synth.make_scene(Rng(0), synth.two_plane_spec())


@pytest.fixture(scope="session")
def small_scene():
    return synth.make_scene(Rng(3), synth.two_plane_spec(16, 24))


@pytest.fixture
def gen():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES = []


@pytest.fixture
def criterion(capsys):
    """Record and print ``A<n> PASS|FAIL detail``; fails the test when the check fails."""

    def record(name, ok, detail=""):
        line = f"{name} {'PASS' if ok else 'FAIL'} {detail}".rstrip()
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print(f"\n{line}")
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
