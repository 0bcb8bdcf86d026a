from __future__ import annotations

import numpy as np
import pytest

from harper.arithmetic import golden_mean
from harper.operator import Coupling, build_truncation, dual_coupling


@pytest.fixture(scope="session")
def golden():
    return golden_mean(30)


@pytest.fixture(scope="session")
def amo():
    return Coupling(l1=0.0, l2=2.0, l3=0.0)


@pytest.fixture(scope="session")
def extended():
    return Coupling(l1=0.1, l2=2.0, l3=0.2)


@pytest.fixture(scope="session")
def centered_energy():
    """E = λ₂μ for the dual eigenpair of the (2M+1)-site truncation peaked nearest its middle."""

    def energy(lam, freq, theta, M):
        op = build_truncation(dual_coupling(lam), freq, theta - M * freq.value, 2 * M + 1)
        values, vectors = np.linalg.eigh(op.to_dense())
        peaks = np.argmax(np.abs(vectors), axis=0)
        return lam.l2 * float(values[int(np.argmin(np.abs(peaks - M)))])

    return energy


@pytest.fixture
def workspace(tmp_path, monkeypatch):
    """Run inside tmp_path with the cloud cache pointed there too."""
    monkeypatch.chdir(tmp_path)
    monkeypatch.setenv("HARPER_CACHE_DIR", str(tmp_path / "cache"))
    return tmp_path
