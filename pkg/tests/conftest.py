import pytest

from replaylab.continual import RegimeConfig
from replaylab.domainsynth import BRIGHT, DARK, DomainSpec, generate_domain
from replaylab.segnet import ModelConfig

TINY_MODEL = ModelConfig(levels=2, base_features=2, patch_size=16)


def tiny_regime(regime, **kw):
    base = dict(regime=regime, epochs=1, lr=1e-3, patch_size=16, patches_per_image=2)
    base.update(kw)
    return RegimeConfig(**base)


def tiny_specs(sizes=(6, 5, 5, 4)):
    pols = [BRIGHT, DARK, BRIGHT, BRIGHT]
    return [
        DomainSpec(f"D{i}", n, pols[i % 4], (1, 2), (1.5, 3.0), 0.1, 0.2, (16, 16), seed=100 + i)
        for i, n in enumerate(sizes)
    ]


@pytest.fixture(scope="session")
def tiny_cohort():
    return [generate_domain(s) for s in tiny_specs()]
