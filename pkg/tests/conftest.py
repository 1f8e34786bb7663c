"""Shared fixtures: tiny bags and models, and a session cache of benchmark runs."""

from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from cmil.bench import desk_config, preset, run_sequence
from cmil.gdat import GdatConfig
from cmil.model import MILModel, ModelConfig
from cmil.synth import Bag, build_sequence, grid_positions

settings.register_profile("cmil", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("cmil")

# acceptance verdicts, printed once at the end of the session
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def make_bag(rng: np.random.Generator, side: int = 4, dim: int = 8, label: int = 1,
             positives: int = 3) -> Bag:
    """Random bag on a ``side x side`` grid; a positive bag gets ``positives`` marked instances."""
    M = side * side
    X = rng.standard_normal((M, dim))
    y = np.zeros(M, dtype=np.int64)
    if label != 0:
        idx = rng.choice(M, size=positives, replace=False)
        y[idx] = 1
        X[idx] += 2.0
    return Bag(instances=X, positions=grid_positions(side), bag_label=label, instance_labels=y)


def make_model(dim: int = 8, classes: int = 2, F: int = 2, blocks: int = 2, seed: int = 0,
               init_std: float = 0.3, use_gdat: bool = True) -> MILModel:
    """Small model with non-trivial weights everywhere (scorer and head included)."""
    cfg = ModelConfig(feature_dim=dim, num_classes=classes, init_std=init_std, head_init_std=init_std,
                      use_gdat=use_gdat, gdat=GdatConfig(model_dim=dim, num_blocks=blocks, grouping_factor=F))
    model = MILModel(cfg, seed=seed)
    g = torch.Generator().manual_seed(seed + 1)
    with torch.no_grad():
        model.attn_score.copy_(torch.randn(model.attn_score.shape, generator=g, dtype=torch.float64))
    return model


# Key biases add the same amount to every score in a softmax row, so their
# true gradient is exactly zero; a relative error between two round-off
# values is meaningless there.
STRUCTURAL_ZERO = (".k.bias",)
FD_NOISE = 1e-8


def gradient_failures(report, tol: float = 1e-4) -> dict:
    """Relative-error oracle, with structurally zero gradients held to an absolute noise bound."""
    bad = {}
    for name, err in report.errors.items():
        if name.endswith(STRUCTURAL_ZERO):
            a, f = np.abs(report.analytic[name]).max(), np.abs(report.numeric[name]).max()
            if a > 1e-12 or f > FD_NOISE:
                bad[name] = (a, f)
        elif err > tol:
            bad[name] = err
    return bad


def assert_gradients_match(report, tol: float = 1e-4) -> None:
    bad = gradient_failures(report, tol)
    assert not bad, bad


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class BenchCache:
    """Desk-scale runs keyed by ``(method, seed)``, computed on first use."""

    seeds = (0, 1, 2)

    def __init__(self):
        self._data = {}
        self._runs = {}

    def base(self, seed: int):
        return desk_config(seed)

    def datasets(self, seed: int):
        if seed not in self._data:
            b = self.base(seed)
            self._data[seed] = build_sequence(b.num_tasks, b.bags_per_task, b.data_seed, b.synth)
        return self._data[seed]

    def run(self, method: str, seed: int):
        key = (method, seed)
        if key not in self._runs:
            self._runs[key] = run_sequence(preset(method, self.base(seed)), datasets=self.datasets(seed))
        return self._runs[key]

    def mean(self, method: str, metric: str) -> float:
        return float(np.mean([self.run(method, s).summary[metric] for s in self.seeds]))

    def cached(self):
        return list(self._runs.values())


@pytest.fixture(scope="session")
def bench() -> BenchCache:
    return BenchCache()


@pytest.fixture
def tiny_config():
    """Two short tasks: enough to exercise every code path in a few seconds."""
    base = desk_config(0, num_tasks=2)
    return replace(base, bags_per_task=10, train=replace(base.train, epochs=2))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
