import numpy as np
import pytest

from finecount import counting
from finecount.specializer import BilinearToySegmenter
from finecount.synthesis import MockShapesGenerator, build_toy_benchmark, synthesize_dataset
from finecount.taxonomy import CategorySpec, NegativeSource, expand_prompts, source_negatives


@pytest.fixture(scope="session")
def generator():
    return MockShapesGenerator()


@pytest.fixture(scope="session")
def segmenter():
    return BilinearToySegmenter(seed=0)


@pytest.fixture(scope="session")
def counter():
    return counting.CentroidCounter()


@pytest.fixture(scope="session")
def red_spec():
    spec = CategorySpec(
        name="red disk", parent="shape",
        negative_source=NegativeSource.STATIC, negatives=["yellow diamond"],
    )
    return source_negatives(spec)


@pytest.fixture(scope="session")
def red_pairs(red_spec, generator):
    bundle = expand_prompts(red_spec, 12, seed=0)
    return synthesize_dataset(red_spec, bundle, generator,
                              n_pos=12, n_neg_total=12, seed=0)


@pytest.fixture(scope="session")
def toy_bench(tmp_path_factory):
    root = tmp_path_factory.mktemp("bench")
    annotations = build_toy_benchmark(str(root), n_images=16, seed=7)
    return str(root), annotations


def rand_probs(rng, shape):
    """Strictly interior probabilities, away from the clamp boundary."""
    return rng.uniform(1e-4, 1.0 - 1e-4, size=shape)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_VERDICTS: list[str] = []


def record_verdict(line: str) -> None:
    ACCEPTANCE_VERDICTS.append(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_VERDICTS:
            terminalreporter.write_line(line)
