import numpy as np
import pytest

from oneshot_dil.data import SyntheticSpec, gen_synthetic
from oneshot_dil.harness import BaseTrainConfig, DomainSpec, split_domains, train_base
from oneshot_dil.models import ModelSpec, build
from oneshot_dil.rng import substream


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_domains():
    """4 raw classes of 8x8 images; class 3 is the new domain (label of class 0)."""
    spec = SyntheticSpec(num_classes=4, image_side=8, samples_per_class=120, latent_dim=4,
                         separation=1.5, class_std=0.4, pixel_scale=0.15)
    ds = gen_synthetic(spec, substream(0, "tiny-data"))
    return split_domains(ds, DomainSpec(c1=3, c2=0), substream(0, "tiny-split"))


@pytest.fixture(scope="session")
def tiny_base(tiny_domains):
    spec = ModelSpec(kind="small_cnn", widths=(4, 8), num_classes=tiny_domains.num_classes,
                     input_shape=(1, 8, 8))
    model = build(spec, substream(0, "tiny-init"))
    return train_base(model, tiny_domains.orig_train, BaseTrainConfig(epochs=5, batch_size=32),
                      substream(0, "tiny-train"))


@pytest.fixture
def base(tiny_base):
    return tiny_base.copy()


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    """Collects one PASS/FAIL line per acceptance criterion; echoed in the terminal summary."""
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
