"""Polyphase observation model and source separation.

Each symbol interval is sampled at ``P`` offsets; stacking the samples gives
``y(i) = A s(i) + w(i)`` with ``s(i)`` holding the current and next symbol of
every user.  ``A`` is either built from known delays and gains (training) or
estimated blindly with JADE.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_complex_2d
from .pulses import PulseShape

DEFAULT_OFFSETS = (57, 62, 67, 72)
# offsets count from the start of a four-symbol window centred on the pulse
WINDOW_PEAK = 64


class ConvergenceError(RuntimeError):
    """Joint diagonalisation hit its sweep cap."""


@dataclass(eq=False)
class PolyphaseObservation:
    vectors: np.ndarray  # (n_vectors, P), row i is y(first_index + i)
    sampling_offsets: tuple[int, ...]
    anchor: int
    first_index: int = 0

    @property
    def P(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return self.vectors.shape[0]


@dataclass(eq=False)
class MixingEstimate:
    A_hat: np.ndarray
    condition_number: float

    @classmethod
    def from_matrix(cls, A: np.ndarray) -> "MixingEstimate":
        A = np.asarray(A, dtype=complex)
        if not np.all(np.isfinite(A)):
            raise ValueError("mixing matrix has non-finite entries")
        return cls(A, float(np.linalg.cond(A)))


def polyphase_decompose(
    signal,
    sync_anchor: int,
    P: int = 4,
    offsets=DEFAULT_OFFSETS,
    n_vectors: int | None = None,
    first_index: int = 0,
    samples_per_symbol: int | None = None,
) -> PolyphaseObservation:
    """Stack ``y_m(i) = x[anchor + i*sps + offsets[m]]``.

    ``signal`` may be a :class:`~alohacr.channel.BasebandSignal` or a raw array
    (then ``samples_per_symbol`` is required).
    """
    x = getattr(signal, "samples", signal)
    sps = samples_per_symbol or getattr(signal, "samples_per_symbol", None)
    if sps is None:
        raise ValueError("samples_per_symbol is required for raw arrays")
    offsets = tuple(int(o) for o in offsets)
    if len(offsets) != P:
        raise ValueError(f"need {P} sampling offsets, got {len(offsets)}")
    x = np.asarray(x)
    if n_vectors is None:
        n_vectors = (len(x) - 1 - sync_anchor - max(offsets)) // sps - first_index + 1
    idx = (
        sync_anchor
        + (first_index + np.arange(n_vectors))[:, None] * sps
        + np.asarray(offsets)[None, :]
    )
    if n_vectors <= 0 or idx.min() < 0 or idx.max() >= len(x):
        raise IndexError("polyphase sampling points fall outside the signal")
    return PolyphaseObservation(x[idx], offsets, sync_anchor, first_index)


def build_mixing_matrix(
    pulse: PulseShape,
    delays,
    gains,
    P: int = 4,
    offsets=DEFAULT_OFFSETS,
) -> MixingEstimate:
    """``A = H D`` with ``h_mk(0) = p(o_m - tau_k)`` and ``h_mk(-1) = p(o_m - tau_k - Ts)``.

    Delays are in samples, measured from the window peak (offset 64).
    """
    delays = np.atleast_1d(np.asarray(delays, dtype=float))
    gains = np.atleast_1d(np.asarray(gains, dtype=complex))
    if len(delays) != len(gains) or len(delays) not in (1, 2):
        raise ValueError("need one or two users with matching delays and gains")
    o = np.asarray(offsets, dtype=float)[:P] - WINDOW_PEAK
    sps = pulse.samples_per_symbol
    cols = []
    for tau, a in zip(delays, gains):
        cols.append(a * pulse(o - tau))
        cols.append(a * pulse(o - tau - sps))
    return MixingEstimate.from_matrix(np.stack(cols, axis=1))


def ls_equalize(A_hat, observation) -> np.ndarray:
    """Least-squares source estimates, one row per source.

    Raises ``np.linalg.LinAlgError`` when ``A_hat`` is numerically rank deficient.
    """
    A = np.asarray(getattr(A_hat, "A_hat", A_hat), dtype=complex)
    Y = getattr(observation, "vectors", observation)
    Y = check_complex_2d(Y, name="observation")
    if np.linalg.cond(A) > 1e12:
        raise np.linalg.LinAlgError("mixing estimate is numerically singular")
    G = np.linalg.solve(A.conj().T @ A, A.conj().T)
    return G @ Y.T


def _cumulant_matrices(Z: np.ndarray) -> np.ndarray:
    """Hermitian fourth-order cumulant slices of whitened data ``Z`` (T x n)."""
    T, n = Z.shape
    Zc = Z.conj()
    M4 = np.einsum("ti,tj,tk,tl->ijkl", Z, Zc, Z, Zc, optimize=True) / T
    R = Z.T @ Zc / T  # E[z_i z_j*]
    C2 = Z.T @ Z / T  # E[z_i z_k]
    C = (
        M4
        - np.einsum("ij,kl->ijkl", R, R)
        - np.einsum("ik,jl->ijkl", C2, C2.conj())
        - np.einsum("il,kj->ijkl", R, R)
    )
    mats = []
    s2 = np.sqrt(0.5)
    for k in range(n):
        mats.append(C[:, :, k, k])
        for l in range(k + 1, n):
            mats.append(s2 * (C[:, :, l, k] + C[:, :, k, l]))
            mats.append(s2 * 1j * (C[:, :, l, k] - C[:, :, k, l]))
    return np.array(mats)


def _off_diagonal(mats: np.ndarray) -> float:
    n = mats.shape[1]
    mask = ~np.eye(n, dtype=bool)
    return float(np.sum(np.abs(mats[:, mask]) ** 2))


def joint_diagonalize(mats: np.ndarray, tol: float = 1e-8, max_sweeps: int = 100):
    """Unitary ``V`` such that ``V^H M V`` is as diagonal as possible for every ``M``.

    Jacobi sweeps over index pairs with the closed-form complex Givens angle.
    Stops once a sweep lowers the off-diagonal mass by less than ``tol`` times
    the total mass.  Returns ``(V, n_sweeps)``; raises ConvergenceError at the cap.
    """
    mats = np.array(mats, dtype=complex)
    n = mats.shape[1]
    V = np.eye(n, dtype=complex)
    total = float(np.sum(np.abs(mats) ** 2)) or 1.0
    off = _off_diagonal(mats)
    for sweep in range(1, max_sweeps + 1):
        for p in range(n - 1):
            for q in range(p + 1, n):
                g = np.stack(
                    [
                        mats[:, p, p] - mats[:, q, q],
                        mats[:, p, q] + mats[:, q, p],
                        1j * (mats[:, q, p] - mats[:, p, q]),
                    ]
                )
                G = np.real(g @ g.conj().T)
                w, vecs = np.linalg.eigh(G)
                x, y, z = vecs[:, -1]
                if x < 0:
                    x, y, z = -x, -y, -z
                c = np.sqrt(0.5 + x / 2)
                s = 0.5 * (y - 1j * z) / c
                if abs(s) < 1e-14:
                    continue
                R = np.array([[c, -np.conj(s)], [s, c]])
                pq = [p, q]
                V[:, pq] = V[:, pq] @ R
                mats[:, pq, :] = np.einsum("ba,rbk->rak", R.conj(), mats[:, pq, :])
                mats[:, :, pq] = mats[:, :, pq] @ R
        new_off = _off_diagonal(mats)
        if off - new_off < tol * total:
            return V, sweep
        off = new_off
    raise ConvergenceError(f"joint diagonalisation did not settle in {max_sweeps} sweeps")


class JADE(TransformerMixin, BaseEstimator):
    """Complex JADE: whitening plus joint diagonalisation of cumulant matrices.

    Follows the transformer convention: ``X`` has one observation per row.

    Parameters
    ----------
    n_components : int, optional
        Number of sources to extract; defaults to the number of features.
    tol : float
        Relative off-diagonal improvement below which sweeps stop.
    max_sweeps : int
        Sweep cap; exceeding it raises :class:`ConvergenceError`.

    Attributes
    ----------
    components_ : ndarray (n_components, n_features)
        Separating matrix.
    mixing_ : ndarray (n_features, n_components)
        Pseudo-inverse of ``components_``.
    n_sweeps_ : int
    """

    def __init__(self, n_components=None, tol=1e-8, max_sweeps=100):
        self.n_components = n_components
        self.tol = tol
        self.max_sweeps = max_sweeps

    def fit(self, X, y=None):
        X = check_complex_2d(X, min_rows=2)
        T, n_features = X.shape
        n = self.n_components or n_features
        if n > n_features:
            raise ValueError("cannot extract more sources than sensors")
        R = X.T @ X.conj() / T
        w, U = np.linalg.eigh(R)
        w, U = w[::-1][:n], U[:, ::-1][:, :n]
        w = np.maximum(w, w[0] * 1e-14)
        W = (U / np.sqrt(w)).conj().T  # whitening, n x n_features
        Z = X @ W.T
        V, sweeps = joint_diagonalize(_cumulant_matrices(Z), self.tol, self.max_sweeps)
        B = V.conj().T @ W
        A = np.linalg.pinv(B)
        order = np.argsort(-np.linalg.norm(A, axis=0), kind="stable")
        self.components_ = B[order]
        self.mixing_ = A[:, order]
        self.whitening_ = W
        self.n_sweeps_ = sweeps
        self.n_features_in_ = n_features
        return self

    def transform(self, X):
        check_is_fitted(self, "components_")
        X = check_complex_2d(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return X @ self.components_.T

    def inverse_transform(self, S):
        check_is_fitted(self, "components_")
        return check_complex_2d(S) @ self.mixing_.T


def jade_separate(
    observation: PolyphaseObservation, n_sources: int | None = None, **jade_params
) -> tuple[MixingEstimate, np.ndarray]:
    """Blindly estimate ``A`` and return it with the least-squares source estimates."""
    Y = observation.vectors if hasattr(observation, "vectors") else np.asarray(observation)
    if Y.shape[0] < 200:
        raise ValueError("JADE needs at least 200 observation vectors")
    est = JADE(n_components=n_sources, **jade_params).fit(Y)
    mix = MixingEstimate.from_matrix(est.mixing_)
    return mix, ls_equalize(mix, Y)
