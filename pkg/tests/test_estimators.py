import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from confu.data import SyntheticCorpus, SyntheticSpec
from confu.engine import autoregressive_generate
from confu.errors import DimensionError
from confu.estimators import (
    ConfuDraftHead,
    EagleDraftHead,
    SpeculativeGenerator,
    TargetLM,
    check_token_array,
)


@pytest.fixture(scope="module")
def fitted():
    X = SyntheticCorpus(SyntheticSpec(n_sequences=16)).sequences(24)[0]
    target = TargetLM(d_model=16, n_heads=2, n_layers=2, max_seq_len=64, steps=3, batch=2).fit(X)
    eagle = EagleDraftHead(target=target, steps=2, batch=2).fit(X)
    confu = ConfuDraftHead(draft=eagle, soft_prompts=4, n_expert=4, anchors=2, steps=2, batch=2).fit(X)
    return X, target, eagle, confu


def test_params_round_trip_through_clone():
    est = ConfuDraftHead(variant="confu-no-moe", n_expert=3, steps=7)
    params = clone(est).get_params()
    assert params["variant"] == "confu-no-moe" and params["n_expert"] == 3 and params["steps"] == 7
    assert SpeculativeGenerator(nodes=12).set_params(branch=2).get_params()["branch"] == 2


def test_target_outputs(fitted):
    X, target, _, _ = fitted
    proba = target.predict_proba(X[:3, :10])
    assert proba.shape == (3, 259) and np.allclose(proba.sum(1), 1, atol=1e-12)
    assert target.predict(X[:3, :10]).tolist() == proba.argmax(1).tolist()
    assert target.transform(X[:2, :5]).shape == (2, 5, 48)
    assert np.isfinite(target.score(X[:4]))
    assert len(target.log_.losses) == 3


def test_generator_matches_greedy_autoregression(fitted):
    X, target, _, confu = fitted
    gen = SpeculativeGenerator(draft=confu, nodes=6, max_tokens=8).fit()
    prompts = [list(X[0, :6]), list(X[1, :6])]
    outs = gen.predict(prompts)
    for p, out in zip(prompts, outs):
        assert out == autoregressive_generate(target.model_, p, 8, 0.0)
    assert 1.0 <= gen.score(prompts) <= 6.0
    assert gen.decoder_.mode.max_depth == 5


def test_generator_on_baseline_checkpoint(fitted):
    X, _, eagle, _ = fitted
    gen = SpeculativeGenerator(draft=eagle.checkpoint_, nodes=4, max_tokens=5).fit()
    assert gen.decoder_.contemplate is None
    assert len(gen.predict([list(X[2, :4])])[0]) == 5


def test_unfitted_estimators_raise():
    with pytest.raises(NotFittedError):
        TargetLM().predict_proba([[1, 2]])
    with pytest.raises(NotFittedError):
        SpeculativeGenerator().predict([[1]])
    with pytest.raises(NotFittedError):
        ConfuDraftHead(draft=EagleDraftHead()).fit([[1, 2]])


def test_token_array_validation():
    assert check_token_array([[1.0, 2.0]], 5).dtype == np.int64
    with pytest.raises(DimensionError):
        check_token_array([1, 2, 3], 5)
    with pytest.raises(DimensionError):
        check_token_array([[1]], 5)
    with pytest.raises(ValueError):
        check_token_array([[1, 9]], 5)
    with pytest.raises(ValueError):
        check_token_array([[1.5, 2]], 5)
