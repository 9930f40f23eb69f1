import dataclasses
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

import ivclust as ic

# Heavy Monte Carlo runs shared between the module tests and the
# acceptance suite; session scope keeps each to a single execution.


@pytest.fixture(scope="session")
def strong_p1_report():
    design = ic.design_by_name("strong_p1", n=2000)
    return ic.run_monte_carlo(design, reps=200, seed=29)


@pytest.fixture(scope="session")
def strong_p2_report():
    design = ic.design_by_name("strong_p2", n=5000)
    return ic.run_monte_carlo(design, reps=100, seed=31)


@pytest.fixture(scope="session")
def weak_d1_report():
    design = ic.design_by_name("weak_p1_d1", n=2000)
    return ic.run_monte_carlo(design, reps=200, seed=37)


@pytest.fixture(scope="session")
def weak_d3b_report():
    design = ic.design_by_name("weak_p1_d3b", n=2000)
    return ic.run_monte_carlo(design, reps=200, seed=41)


@pytest.fixture(scope="session")
def weak_p2_d1_report():
    design = ic.design_by_name("weak_p2_d1", n=5000)
    return ic.run_monte_carlo(design, reps=100, seed=43)


@pytest.fixture(scope="session")
def sargan_null_stats():
    """Sargan statistics over 2000 all-valid replications (n=2000, 21 IVs)."""
    design = dataclasses.replace(
        ic.design_by_name("strong_p1", n=2000), alpha=np.zeros(21)
    )
    config = ic.SelectionConfig()
    out = []
    for ss in np.random.SeedSequence(47).spawn(2000):
        ds = ic.generate(design, np.random.default_rng(ss))
        out.append(ic.sargan(ds, range(21), config).statistic)
    return np.array(out)


@pytest.fixture()
def config():
    return ic.SelectionConfig()
