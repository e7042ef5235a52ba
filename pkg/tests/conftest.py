import os
import sys

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, os.path.dirname(__file__))

from powerprof import features as feat  # noqa: E402
from powerprof import gan, synth  # noqa: E402

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[n] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")


class SynthRun:
    """The 8 classes x 250 jobs synthetic set with a GAN trained on it."""

    def __init__(self):
        self.ds = synth.generate_dataset(synth.default_specs(), 250, seed=1)
        self.ids, self.X = feat.feature_matrix(self.ds.profiles)
        self.y = np.array([self.ds.labels[j] for j in self.ids])
        self.scaler = feat.fit_scaler(self.X)
        self.Xs = self.scaler.transform(self.X)
        self.model = gan.train(self.Xs, gan.GanConfig(seed=0), self.scaler)
        self.Z = gan.encode(self.model, self.Xs)


@pytest.fixture(scope="session")
def synth_run():
    return SynthRun()
