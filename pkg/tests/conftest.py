from __future__ import annotations

import numpy as np
import pytest
import torch

from medcoder.corpus import label_matrix, split_by_patient
from medcoder.synthetic import default_generator_config, generate_synthetic


@pytest.fixture(scope="session")
def planted_corpus():
    """The default five-code planted corpus (500 admissions) with its split."""
    records, catalog, planted = generate_synthetic(default_generator_config(), seed=0)
    split = split_by_patient(records, (0.7, 0.1, 0.2), seed=0)
    return records, catalog, planted, split


@pytest.fixture(scope="session")
def small_corpus():
    records, catalog, planted = generate_synthetic(default_generator_config(n_admissions=60), seed=3)
    return records, catalog, planted


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


def labels_of(records):
    return label_matrix(records)


@pytest.fixture(scope="session")
def fixture_ranker():
    """Ranker trained with default settings on the bundled 5-code synonym fixture."""
    from medcoder.ranker import RankerConfig, SynonymCorpus, build_synonym_corpus, train_ranker

    bundled = SynonymCorpus.bundled()
    corpus = build_synonym_corpus(bundled.descriptions, bundled.positives, heldout=bundled.heldout)
    model, log = train_ranker(RankerConfig(), corpus)
    return model, corpus, log


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
