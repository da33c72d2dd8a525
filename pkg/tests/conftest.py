import numpy as np
import pytest

from fppl.backbone import BackboneConfig, FrozenBackbone
from fppl.config import ExperimentConfig
from fppl.data import DataSpec
from fppl.federation import AblationFlags, Hyperparams
from fppl.objectives import Classifier
from fppl.prompt import PromptBank


def small_config(**hp_overrides) -> ExperimentConfig:
    """A tiny experiment that runs in well under a second."""
    hp = dict(num_clients=2, num_tasks=2, total_rounds=4, local_epochs=1, server_epochs=2,
              batch_size=16, prompt_length=2, seed=7)
    hp.update(hp_overrides)
    return ExperimentConfig(
        backbone=BackboneConfig(embed_dim=16, num_layers=2, num_heads=2, insert_start=1,
                                insert_end=2, seed=3),
        hp=Hyperparams(**hp),
        data=DataSpec(num_classes=4, train_per_class=8, test_per_class=4, beta=0.5, seed=1),
        flags=AblationFlags(),
        seeds=(7,),
    )


def gradcheck_instance(seed: int):
    """Seeded t=2 instance: D=16, L_p=4, 3 layers, N_all=6."""
    cfg = BackboneConfig(embed_dim=16, num_layers=3, num_heads=4, insert_start=1,
                         insert_end=3, seed=seed)
    bb = FrozenBackbone(cfg)
    rng = np.random.default_rng(seed)
    bank = PromptBank(rng.uniform(-1, 1, (3, 4, 16)), [rng.uniform(-1, 1, (3, 4, 16))])
    psi = rng.uniform(-0.5, 0.5, (16, 2))
    clf = Classifier(rng.normal(0, 0.3, (16, 6)), rng.normal(0, 0.1, 6))
    x = rng.uniform(size=(5, 1, 8, 8))
    y = np.array([0, 1, 2, 3, 2])
    G = {c: rng.normal(size=16) for c in range(6)}
    return bb, bank, psi, clf, x, y, G


def central_difference(f, arrays, h=1e-4):
    """Numerical gradient of scalar f(*arrays) for every coordinate of every array."""
    out = []
    for i, a in enumerate(arrays):
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            plus = [z.copy() for z in arrays]
            minus = [z.copy() for z in arrays]
            plus[i][idx] += h
            minus[i][idx] -= h
            g[idx] = (f(*plus) - f(*minus)) / (2 * h)
        out.append(g)
    return out


def max_relative_error(analytic, numeric):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-12)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


@pytest.fixture
def tiny_cfg():
    return small_config()


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
