import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dualfed.data import DataSpec, generate_synthetic
from dualfed.encoders import (ClassTextBank, EncoderStack, LoraLinear, class_probabilities, encode_image,
                              encode_text, init_pretrained_like)
from dualfed.evaluation import accuracy
from dualfed.numerics import DegenerateEmbeddingError


def straight_line(layers, x, noise=None):
    h = np.asarray(x, dtype=float)
    for i, (W0, A, B) in enumerate(layers):
        if i:
            h = np.tanh(h)
        W = W0 if A is None else W0 + B @ A
        h = W @ h
    if noise is not None:
        h = h + noise
    return h / np.sqrt(np.sum(h * h))


def random_stack(rng, d=5, r=2):
    raw = [(np.eye(d) + 0.3 * rng.standard_normal((d, d)), None, None),
           (np.eye(d) + 0.3 * rng.standard_normal((d, d)), rng.standard_normal((r, d)), rng.standard_normal((d, r)))]
    return EncoderStack([LoraLinear(*l) for l in raw]), raw


def test_zero_noise_equals_no_noise():
    rng = np.random.default_rng(1)
    stack, _ = random_stack(rng)
    x = rng.standard_normal(5)
    assert np.array_equal(encode_image(stack, x, noise=np.zeros(5)), encode_image(stack, x))


def test_identity_stack_passes_unit_vectors():
    stack = EncoderStack([LoraLinear(np.eye(4))])
    x = np.array([0.6, 0.0, 0.8, 0.0])
    assert np.allclose(encode_image(stack, x), x, atol=1e-15)
    bank = ClassTextBank.generate(3, 4, seed=2)
    assert np.allclose(encode_text(stack, bank, 1), bank.vectors[1], atol=1e-15)


def test_image_and_text_match_straight_line_oracle():
    rng = np.random.default_rng(2)
    for _ in range(10):
        stack, raw = random_stack(rng)
        x, noise = rng.standard_normal(5), 0.1 * rng.standard_normal(5)
        assert np.max(np.abs(encode_image(stack, x, noise) - straight_line(raw, x, noise))) < 1e-12
        bank = ClassTextBank.generate(4, 5, seed=int(rng.integers(100)))
        assert np.max(np.abs(encode_text(stack, bank, 2) - straight_line(raw, bank.vectors[2]))) < 1e-12


def test_text_is_deterministic_and_rejects_unknown_class():
    a = ClassTextBank.generate(6, 8, seed=9)
    b = ClassTextBank.generate(6, 8, seed=9)
    assert a.vectors.tobytes() == b.vectors.tobytes()
    m = init_pretrained_like(0, dim=8, hidden=8)
    assert encode_text(m.text, a, 3).tobytes() == encode_text(m.text, b, 3).tobytes()
    with pytest.raises(KeyError):
        encode_text(m.text, a, 6)


def test_degenerate_latent_rejected():
    stack = EncoderStack([LoraLinear(np.eye(3))])
    with pytest.raises(DegenerateEmbeddingError):
        encode_image(stack, np.zeros(3))


def test_probability_examples():
    E = np.eye(4)
    p = class_probabilities(E[2], E, 0.1)
    assert p[2] >= 0.99
    same = np.tile(E[0], (3, 1))
    assert np.allclose(class_probabilities(E[1], same, 0.05), 1 / 3)
    # unit text rows whose first coordinates give sims (0.8, 0.2) against e1
    text = np.array([[0.8, 0.6], [0.2, np.sqrt(1 - 0.04)]])
    z = np.array([1.0, 0.0])
    p = class_probabilities(z, text, 0.05)
    assert abs(p[0] - 1 / (1 + np.exp(-12))) < 1e-12


@given(st.integers(0, 10_000))
def test_probabilities_invariant_under_common_rotation(seed):
    rng = np.random.default_rng(seed)
    d, c = 6, 5
    z = rng.standard_normal(d)
    z /= np.linalg.norm(z)
    T = rng.standard_normal((c, d))
    T /= np.linalg.norm(T, axis=1, keepdims=True)
    Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    assert np.max(np.abs(class_probabilities(z, T, 0.05) - class_probabilities(Q @ z, T @ Q.T, 0.05))) < 1e-10


@given(st.integers(0, 10_000))
def test_embeddings_are_unit_norm(seed):
    m = init_pretrained_like(seed, lora_init=1.0)
    rng = np.random.default_rng(seed)
    lora = {k: rng.standard_normal(v.shape) for k, v in m.image.lora_state().items()}
    z = encode_image(m.image, rng.standard_normal((7, 16)), noise=0.1 * rng.standard_normal((7, 16)), lora=lora)
    assert np.all(np.abs(np.linalg.norm(z, axis=1) - 1) < 1e-9)
    bank = ClassTextBank.generate(5, 16, seed)
    t = encode_text(m.text, bank, np.arange(5), lora=lora)
    assert np.all(np.abs(np.linalg.norm(t, axis=1) - 1) < 1e-9)


@pytest.mark.parametrize("seed", [0, 1, 7])
def test_init_lora_is_zero_and_neutral(seed):
    m = init_pretrained_like(seed)
    for stack in (m.image, m.text):
        for k, v in stack.lora_state().items():
            if k.endswith(".B"):
                assert not v.any()
    x = np.random.default_rng(seed).standard_normal((4, 16))
    frozen = EncoderStack([LoraLinear(l.W0) for l in m.image.layers])
    assert np.array_equal(encode_image(m.image, x), encode_image(frozen, x))


def test_zero_scale_gives_identity_layers():
    m = init_pretrained_like(0, scale=0.0)
    for l in m.image.layers + m.text.layers:
        assert np.array_equal(l.W0, np.eye(16))


@pytest.mark.parametrize("scale", [0.0, 0.02])
def test_zero_shot_on_aligned_noiseless_classes(scale):
    # the generator's literal form: samples sit on the class-name vectors
    task = generate_synthetic(DataSpec(num_classes=10, base_fraction=1.0, noise=0.0, align_gap=0.0,
                                       samples_per_class=5, test_per_class=5, seed=4))
    m = init_pretrained_like(4, scale=scale)
    text = encode_text(m.text, task.bank, np.arange(10))
    acc = accuracy(m.image, None, text, task.test.X, task.test.y, range(10))
    assert acc == 1.0 if scale == 0.0 else acc > 0.9
