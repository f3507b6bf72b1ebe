import numpy as np
import pytest

from skelprompt.autodiff import ParamStore
from skelprompt.extractor import ExtractorConfig, init_extractor
from skelprompt.skeleton_data import Joint, RawClip, RawFrame, RawPerson, TokenCloud

SMALL = ExtractorConfig(stem_width=8, block_widths=(8, 12), bottleneck_ratio=0.25)


def make_clip(
    video_id="clip",
    frame_count=4,
    persons=1,
    joints=17,
    width=320,
    height=224,
    label=None,
    seed=0,
    num_joints=17,
):
    rng = np.random.default_rng(seed)
    frames = []
    for t in range(frame_count):
        people = []
        for pid in range(persons):
            people.append(
                RawPerson(
                    pid,
                    tuple(
                        Joint(k, float(rng.uniform(0, width)), float(rng.uniform(0, height)), float(rng.uniform(0, 1)))
                        for k in range(joints)
                    ),
                )
            )
        frames.append(RawFrame(t, tuple(people)))
    return RawClip(video_id, width, height, 30.0, frame_count, label, tuple(frames), num_joints).validate()


def random_cloud(rng, n_min=1, n_max=40, source="c"):
    return TokenCloud(rng.uniform(0, 1, size=(int(rng.integers(n_min, n_max + 1)), 7)), source)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_store():
    store = ParamStore()
    init_extractor(store, SMALL, np.random.default_rng(7))
    return store


# One PASS/FAIL line per acceptance criterion, shown after the run.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
