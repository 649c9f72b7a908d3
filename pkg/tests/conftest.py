import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from advcolor.classifier import ConvNetClassifier
from advcolor.data import default_targets, make_corpus


@pytest.fixture(scope="session")
def unit_corpus():
    return make_corpus(n_train=800, n_val=200, seed=123)


@pytest.fixture(scope="session")
def unit_model(unit_corpus):
    xtr, ytr, xva, yva = unit_corpus
    model = ConvNetClassifier(architecture="small", epochs=8, seed=123)
    model.fit(xtr, ytr, validation=(xva, yva))
    assert model.score(xva, yva) >= 0.85
    return model


@pytest.fixture(scope="session")
def unit_transfer_model(unit_corpus):
    xtr, ytr, xva, yva = unit_corpus
    model = ConvNetClassifier(architecture="deep", epochs=8, seed=124)
    model.fit(xtr, ytr, validation=(xva, yva))
    assert model.score(xva, yva) >= 0.85
    return model


@pytest.fixture(scope="session")
def unit_suite(unit_corpus, unit_model):
    """A small suite of correctly classified validation images + targets."""
    _, _, xva, yva = unit_corpus
    pred = unit_model.predict(xva)
    keep = np.where(pred == yva)[0][:12]
    targets = default_targets(yva)[keep]
    return xva[keep], yva[keep], targets
