import math
import os
import subprocess

import numpy as np
import pytest

import covsearch


def test_normalize_and_similarity():
    x = covsearch.l2_normalize(np.array([[3.0, 4.0], [1.0, 0.0]], dtype=np.float32))
    np.testing.assert_allclose(x[0], [0.6, 0.8], atol=1e-7)
    sims = covsearch.similarity_matrix(x, x)
    np.testing.assert_allclose(np.diag(sims), 1.0, atol=1e-6)
    with pytest.raises(covsearch.CovsearchError) as info:
        covsearch.l2_normalize(np.zeros((1, 3), dtype=np.float32))
    assert info.value.code == "ZeroVector"


def test_unnormalized_input_is_rejected():
    x = np.array([[2.0, 0.0]], dtype=np.float32)
    with pytest.raises(covsearch.CovsearchError):
        covsearch.similarity_matrix(x, x)


def test_top_k_tie_break():
    ids, scores = covsearch.top_k(np.array([[0.2, 0.9, 0.9, 0.1]], dtype=np.float32), 2)
    assert ids.tolist() == [[1, 2]]
    np.testing.assert_allclose(scores, [[0.9, 0.9]])


def test_pipeline_on_synthetic_data():
    q, g, gt = covsearch.generate_synthetic(identities=32, dim=16, sigma=0.0, seed=3)
    ids, scores = covsearch.top_k(covsearch.similarity_matrix(q, g), 5)
    recall = covsearch.recall_at_k(ids, gt, [1, 5])
    assert recall[1] == 1.0
    out = covsearch.resolve(ids, scores)
    assert out["audit"] == []
    assert out["ids"].tolist() == ids.tolist()


def test_resolve_two_query_collision():
    ids = np.array([[0, 1], [0, 3]])
    scores = np.array([[0.9, 0.5], [0.8, 0.7]], dtype=np.float32)
    out = covsearch.resolve(ids, scores)
    assert out["ids"][:, 0].tolist() == [0, 3]
    (round_, answer, winner, loser, delta), = out["audit"]
    assert (round_, answer, winner, loser) == (1, 0, 0, 1)
    assert delta == pytest.approx(0.1, abs=1e-6)


def test_losses_closed_form():
    eye = np.eye(2, dtype=np.float32)
    assert covsearch.contrastive_loss(eye, eye) == pytest.approx(
        -math.log(math.e / (math.e + 1)), abs=1e-6
    )
    assert covsearch.match_loss(eye, eye, [1, 0], [1, 0], scale=0.0, bias=0.0) == pytest.approx(
        math.log(2), abs=1e-6
    )


def test_assignment_oracles_agree():
    sims = np.array([[0.9, 0.1], [0.8, 0.7]], dtype=np.float32)
    assert covsearch.assignment(sims)[1] == pytest.approx(1.6, abs=1e-6)
    assert covsearch.assignment(sims, exhaustive=True)[0] == [0, 1]


def test_train_adapter_lowers_loss():
    q, g, gt = covsearch.generate_synthetic(identities=32, dim=8, sigma=0.3, seed=5)
    out = covsearch.train_adapter(q, g, gt, epochs=3, step_size=1e-2, seed=1)
    assert out["trace"][-1] < out["trace"][0]
    assert out["w_text"].shape == (8, 8)


@pytest.mark.skipif("COVSEARCH_CLI" not in os.environ, reason="CLI path not provided")
def test_cli_help():
    result = subprocess.run(
        [os.environ["COVSEARCH_CLI"], "--help"], capture_output=True, text=True, check=False
    )
    assert result.returncode == 0
    assert "resolve" in result.stdout
