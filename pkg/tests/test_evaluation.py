import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dualfed.data import Dataset
from dualfed.encoders import EncoderStack, LoraLinear, class_probabilities, encode_image
from dualfed.evaluation import accuracy, evaluate_global, harmonic_mean, predict

IDENT = EncoderStack([LoraLinear(np.eye(3))])


def test_harmonic_mean_examples():
    assert harmonic_mean(0.4, 0.4) == pytest.approx(0.4, abs=1e-15)
    assert harmonic_mean(1.0, 0.0) == 0.0
    assert harmonic_mean(0.0, 0.0) == 0.0
    assert harmonic_mean(0.9, 0.6) == pytest.approx(0.72, abs=1e-15)


def test_perfect_and_single_candidate():
    X, y = np.eye(3), np.arange(3)
    assert accuracy(IDENT, None, np.eye(3), X, y, [0, 1, 2]) == 1.0
    assert accuracy(IDENT, None, np.eye(3), X[[0, 1]], [1, 1], [1]) == 1.0


def test_hand_built_two_of_three():
    text = np.eye(3)
    X = np.array([[1.0, 0.1, 0.0], [0.0, 1.0, 0.2], [0.9, 0.0, 0.3]])
    # argmaxes 0, 1, 0 against labels 0, 1, 2
    assert accuracy(IDENT, None, text, X, [0, 1, 2], [0, 1, 2]) == pytest.approx(2 / 3)


def test_ties_go_to_lowest_id_and_empty_is_absent():
    text = np.array([[1.0, 0, 0], [1.0, 0, 0], [0, 1.0, 0]])
    assert predict(np.array([[1.0, 0, 0]]), text, [2, 1, 0]).tolist() == [0]
    assert predict(np.array([[1.0, 0, 0]]), text, [1, 2]).tolist() == [1]
    assert accuracy(IDENT, None, text, np.zeros((0, 3)), [], [0]) is None
    with pytest.raises(ValueError):
        accuracy(IDENT, None, text, np.eye(3)[:1], [2], [0, 1])
    with pytest.raises(ValueError):
        predict(np.eye(3), text, [])


@given(st.integers(0, 10_000), st.floats(0.001, 10.0), st.floats(0.001, 10.0))
def test_accuracy_does_not_depend_on_tau(seed, t1, t2):
    rng = np.random.default_rng(seed)
    text = rng.standard_normal((4, 3))
    text /= np.linalg.norm(text, axis=1, keepdims=True)
    z = encode_image(IDENT, rng.standard_normal((20, 3)))
    a = np.argmax(class_probabilities(z, text, t1), axis=1)
    b = np.argmax(class_probabilities(z, text, t2), axis=1)
    agree = a == b
    # float rounding can only matter where two sims are nearly equal
    sims = np.sort(z @ text.T, axis=1)
    assert np.all(agree | (sims[:, -1] - sims[:, -2] < 1e-12))
    assert np.array_equal(predict(z, text, range(4)), np.argmax(z @ text.T, axis=1))


def test_evaluate_global_protocol():
    text = np.eye(3)
    X = np.array([[1.0, 0, 0], [0, 1.0, 0], [0, 0.4, 0.5], [0.6, 0, 0.5]])
    y = np.array([0, 1, 2, 2])
    test = Dataset(X, y, np.zeros(4, int), np.arange(4))
    out = evaluate_global(IDENT, None, text, test, [0, 1], [2], [([0], [0]), ([1], [0])])
    assert out["base_acc"] == 1.0
    # novel candidates are the novel classes only
    assert out["novel_acc"] == 1.0
    assert out["local_acc"] == 1.0
    assert out["hm"] == harmonic_mean(1.0, 1.0)
