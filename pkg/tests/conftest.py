import sys
from functools import lru_cache
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from patchreg import Raster, SynthConfig, SynthPair, demo_source, synth_pair


SMALL_CFG = SynthConfig(
    src_side=256,
    out_side=128,
    theta_range_deg=(-45.0, 45.0),
    trans_range=16.0,
)


@lru_cache(maxsize=8)
def _cached_source(src_side: int, seed: int) -> tuple[Raster, Raster]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, src_side]))
    return demo_source(src_side, rng)


def make_pair(seed: int, cfg: SynthConfig = SMALL_CFG, source_seed: int = 0) -> SynthPair:
    bright, mask = _cached_source(cfg.src_side, source_seed)
    rng = np.random.default_rng(np.random.SeedSequence([0xC0FE, seed]))
    return synth_pair(bright, mask, cfg, rng)


@pytest.fixture
def small_cfg() -> SynthConfig:
    return SMALL_CFG


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


def pytest_runtest_logreport(report):
    """One visible PASS/FAIL line per acceptance criterion."""
    if report.when == "call" and "test_acceptance.py" in report.nodeid:
        name = report.nodeid.split("::")[-1]
        outcome = "PASS" if report.passed else "FAIL"
        print(f"\nACCEPTANCE {name}: {outcome}")
