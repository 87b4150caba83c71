import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from alohacr.pulses import design_pulse
from alohacr.separation import (
    DEFAULT_OFFSETS,
    JADE,
    WINDOW_PEAK,
    ConvergenceError,
    build_mixing_matrix,
    jade_separate,
    ls_equalize,
    polyphase_decompose,
)

IOTA = design_pulse("iota", 32, 8)
OFF = np.asarray(DEFAULT_OFFSETS)


def qpsk(rng, shape):
    return np.exp(1j * np.pi / 4 * (2 * rng.integers(0, 4, shape) + 1))


def best_match(S_hat, S):
    """|normalised correlation| matrix and the best per-true-source match."""
    Sh = S_hat / np.linalg.norm(S_hat, axis=1, keepdims=True)
    St = S / np.linalg.norm(S, axis=1, keepdims=True)
    C = np.abs(Sh.conj() @ St.T)
    return C, C.max(axis=0)


def brute_force(symbols, gain, tau, n):
    # y(t) = a * sum_i s(i) p(t - i*sps - tau), window peak of symbol 0 at WINDOW_PEAK
    t = np.arange(n)
    return gain * sum(s * IOTA(t - WINDOW_PEAK - 32 * i - tau) for i, s in enumerate(symbols))


def test_single_symbol_samples_the_pulse():
    x = brute_force([0.5 - 1j], 1.0 + 1j, 0, 400)
    obs = polyphase_decompose(x, 0, n_vectors=1, samples_per_symbol=32)
    np.testing.assert_allclose(obs.vectors[0], (1 + 1j) * (0.5 - 1j) * IOTA(OFF - WINDOW_PEAK))


def test_adjacent_symbol_term_matches_brute_force():
    s = [1.0, 1j, -1.0]
    x = brute_force(s, 0.7, 5, 600)
    obs = polyphase_decompose(x, 0, n_vectors=2, samples_per_symbol=32)
    A = build_mixing_matrix(IOTA, [5], [0.7]).A_hat
    # y(i) = h(0) s(i) + h(-1) s(i+1); every other symbol enters through the pulse tails
    for i in range(2):
        lead = A[:, 0] * s[i] + A[:, 1] * s[i + 1]
        rest = sum(
            0.7 * s[j] * IOTA(OFF - WINDOW_PEAK - 5 + 32 * (i - j))
            for j in range(len(s))
            if j not in (i, i + 1)
        )
        np.testing.assert_allclose(obs.vectors[i], lead + rest, atol=1e-12)
        assert np.abs(A[:, 1] * s[i + 1]).max() > 1e-2
        far = sum(
            0.7 * s[j] * IOTA(OFF - WINDOW_PEAK - 5 + 32 * (i - j))
            for j in range(len(s))
            if abs(i - j) >= 2
        )
        assert np.abs(far).max() < 0.01 * 0.7


def test_permuted_offsets_permute_rows(rng):
    x = rng.standard_normal(2000) + 1j * rng.standard_normal(2000)
    perm = [2, 0, 3, 1]
    a = polyphase_decompose(x, 10, samples_per_symbol=32)
    b = polyphase_decompose(x, 10, offsets=OFF[perm], samples_per_symbol=32)
    np.testing.assert_array_equal(a.vectors[:, perm], b.vectors)


def test_out_of_bounds_rejected():
    with pytest.raises(IndexError):
        polyphase_decompose(np.zeros(100), 0, n_vectors=10, samples_per_symbol=32)
    with pytest.raises(ValueError):
        polyphase_decompose(np.zeros(100), 0)


def test_mixing_matrix_structure():
    A = build_mixing_matrix(IOTA, [0.0], [1.0]).A_hat
    np.testing.assert_allclose(A[:, 0], IOTA(OFF - WINDOW_PEAK))
    B = build_mixing_matrix(IOTA, [0.0, 16.0], [1.0, 1.0]).A_hat
    C = build_mixing_matrix(IOTA, [0.0, 16.0], [1.0, 2j]).A_hat
    np.testing.assert_allclose(C[:, 2:], 2j * B[:, 2:])
    np.testing.assert_allclose(C[:, :2], B[:, :2])
    assert A.shape == (4, 2) and B.shape == (4, 4)


def test_equal_delays_are_ill_conditioned():
    good = build_mixing_matrix(IOTA, [0.0, 16.0], [1.0, 1.0]).condition_number
    bad = build_mixing_matrix(IOTA, [0.0, 0.0], [1.0, 0.8j]).condition_number
    assert bad > 100 * good


@given(arrays(np.float64, (8, 4), elements=st.floats(-1, 1)), st.integers(0, 2**32 - 1))
def test_equalizer_identity(M, seed):
    A = M[:4] + 1j * M[4:]
    if np.linalg.cond(A) > 1e6:
        A = A + 2 * np.eye(4)
    s = qpsk(np.random.default_rng(seed), (4, 50))
    np.testing.assert_allclose(ls_equalize(A, (A @ s).T), s, atol=1e-8)


def test_equalizer_permutation(rng):
    A = rng.standard_normal((4, 4)) + 1j * rng.standard_normal((4, 4))
    s = qpsk(rng, (4, 30))
    perm = [3, 1, 0, 2]
    out = ls_equalize(A[:, perm], (A @ s).T)
    np.testing.assert_allclose(out, s[perm], atol=1e-10)


def test_equalizer_singular_rejected():
    A = np.ones((4, 4), dtype=complex)
    with pytest.raises(np.linalg.LinAlgError):
        ls_equalize(A, np.ones((10, 4)))


def test_noise_enhancement_bounded_by_conditioning(rng):
    A = build_mixing_matrix(IOTA, [0.0, 16.0], [1.0, 1.0]).A_hat
    s = qpsk(rng, (4, 20000))
    sigma2 = 0.01 * np.mean(np.abs(A @ s) ** 2)
    w = np.sqrt(sigma2 / 2) * (rng.standard_normal((4, 20000)) + 1j * rng.standard_normal((4, 20000)))
    err = ls_equalize(A, (A @ s + w).T) - s
    sv = np.linalg.svd(A, compute_uv=False)
    assert np.mean(np.abs(err) ** 2) <= 1.1 * sigma2 / sv.min() ** 2


def test_jade_identity_mixing(rng):
    s = qpsk(rng, (4, 414))
    _, S = jade_separate(s.T)
    C, best = best_match(S, s)
    assert np.all(best > 0.999)
    assert len(set(C.argmax(axis=0))) == 4


def test_jade_random_mixtures():
    rng = np.random.default_rng(2)
    worst = []
    for _ in range(100):
        while True:
            A = rng.standard_normal((4, 4)) + 1j * rng.standard_normal((4, 4))
            if np.linalg.cond(A) < 10:
                break
        s = qpsk(rng, (4, 414))
        X = A @ s
        # 30 dB relative to the unit-power sources
        sigma = np.sqrt(1e-3 / 2)
        X = X + sigma * (rng.standard_normal(X.shape) + 1j * rng.standard_normal(X.shape))
        _, S = jade_separate(X.T)
        C, best = best_match(S, s)
        assert len(set(C.argmax(axis=0))) == 4
        worst.append(best.min())
    assert min(worst) > 0.99


@given(st.integers(0, 2**32 - 1))
def test_jade_ambiguity_contract(seed):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((4, 4)) + 1j * rng.standard_normal((4, 4))
    A = A + 3 * np.eye(4)
    s = qpsk(rng, (4, 600))
    perm = rng.permutation(4)
    Lam = np.diag(np.exp(2j * np.pi * rng.random(4)))
    # A Pi Lam applied to (Pi Lam)^-1 s gives the same mixture; separate the relabelled one
    A2 = A[:, perm] @ Lam
    _, S1 = jade_separate((A @ s).T)
    _, S2 = jade_separate((A2 @ s).T)
    _, b1 = best_match(S1, s)
    _, b2 = best_match(S2, s)
    assert np.all(b1 > 0.99) and np.all(b2 > 0.99)


def test_jade_rank_deficient_fails_gate(rng):
    A = build_mixing_matrix(IOTA, [0.0, 0.0], [1.0, 0.8j]).A_hat
    s = qpsk(rng, (4, 414))
    X = A @ s
    X = X + 1e-3 * (rng.standard_normal(X.shape) + 1j * rng.standard_normal(X.shape))
    try:
        _, S = jade_separate(X.T)
    except (ConvergenceError, np.linalg.LinAlgError):
        return
    _, best = best_match(S, s)
    assert best.min() < 0.9


def test_jade_needs_enough_vectors(rng):
    with pytest.raises(ValueError):
        jade_separate(qpsk(rng, (100, 4)))


def test_jade_estimator_interface(rng):
    s = qpsk(rng, (2, 500))
    A = np.array([[1, 0.4], [0.3j, 1], [0.2, 0.5]])
    est = JADE(n_components=2).fit((A @ s).T)
    assert est.components_.shape == (2, 3) and est.mixing_.shape == (3, 2)
    S = est.transform((A @ s).T)
    _, best = best_match(S.T, s)
    assert np.all(best > 0.999)
    np.testing.assert_allclose(est.inverse_transform(S), (A @ s).T, atol=1e-8)
    with pytest.raises(ValueError):
        est.transform(np.ones((5, 4)))
    with pytest.raises(ValueError):
        JADE(n_components=5).fit((A @ s).T)
