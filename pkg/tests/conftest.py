from __future__ import annotations

import numpy as np
import pytest

from tokvid.synthetic import Dynamics, SyntheticProcess, gen_video

# acceptance lines collected during the session, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def shift_process():
    return SyntheticProcess(num_data=3, tokens_per_frame=2, dynamics=Dynamics.CYCLIC_SHIFT)


@pytest.fixture
def noisy_process():
    return SyntheticProcess(num_data=3, tokens_per_frame=2, noise=0.1)


@pytest.fixture
def shift_videos(shift_process):
    rng = np.random.default_rng(1)
    return [gen_video(shift_process, 32, rng) for _ in range(16)]
