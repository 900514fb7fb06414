# -------------------------

pinv_cutoff = 1e-12 # relative to the largest singular value
kernel_cutoff = 1e-10 # relative to the largest Gram eigenvalue
accumulate_block = 4096 # columns per block when summing A and G
batch_count = 20 # batches for the batch-means standard error

csv_digits = 17
binary_magic = b'TOPK1'

# -------------------------

import sys
import os
import tempfile
import warnings
from contextlib import contextmanager
from dataclasses import dataclass, field
from math import comb
from typing import Optional

import numpy as np
import pandas as pd
from scipy import linalg
from sklearn.metrics.pairwise import polynomial_kernel as sk_polynomial_kernel

from dictionaries import Dictionary, BoxPartition, eval_matrix


class NumericalWarning(UserWarning):
    pass


class EstimationError(ValueError):
    pass


# Data containers

@dataclass(frozen=True)
class TrajectoryPairs:
    """Snapshot matrices X, Y (d x m) with Y[:, i] the image of X[:, i]."""
    X: np.ndarray
    Y: np.ndarray
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        Y = np.atleast_2d(np.asarray(self.Y, dtype=float))
        if X.shape != Y.shape:
            raise EstimationError(f"X {X.shape} and Y {Y.shape} differ in shape")
        if X.shape[1] < 1:
            raise EstimationError("at least one pair is required (m = 0)")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
            raise EstimationError("pairs contain non-finite entries")
        object.__setattr__(self, 'X', X)
        object.__setattr__(self, 'Y', Y)

    @property
    def d(self):
        return self.X.shape[0]

    @property
    def m(self):
        return self.X.shape[1]

    @classmethod
    def concat(cls, *pairs):
        meta = dict(pairs[0].meta)
        meta['parts'] = len(pairs)
        return cls(np.hstack([p.X for p in pairs]), np.hstack([p.Y for p in pairs]), meta)

    def reversed(self):
        return TrajectoryPairs(self.Y, self.X, {**self.meta, 'reversed': True})

    def positions(self, n):
        return TrajectoryPairs(self.X[:n], self.Y[:n], {**self.meta, 'positions': n})


@dataclass(frozen=True)
class TransferMatrix:
    P: np.ndarray
    counts: np.ndarray
    boxes: BoxPartition
    totals: np.ndarray
    empty_rows: tuple = ()

    @property
    def k(self):
        return self.P.shape[0]


@dataclass(frozen=True)
class EdmdResult:
    M_K: np.ndarray
    A: np.ndarray
    G: np.ndarray
    residual: float
    dictionary: Dictionary
    m: int
    rank: int
    cond: float
    formulation: str
    M_P: Optional[np.ndarray] = None

    @property
    def k(self):
        return self.M_K.shape[0]

    @property
    def operator(self):
        return self.M_K if self.M_P is None else self.M_P


@dataclass(frozen=True)
class KernelEdmdResult:
    A_hat: np.ndarray
    G_hat: np.ndarray
    M_hat: np.ndarray
    centers: np.ndarray
    degree: int
    rank: int

    @property
    def m(self):
        return self.M_hat.shape[0]

    @property
    def dictionary(self):
        """Kernel sections f(x_i, .) so that v_hat Psi evaluates the lifted eigenfunction."""
        return Dictionary.kernel_sections(self.centers, self.degree)

    def lift(self, v_hat, dictionary):
        """v = v_hat Psi_X^T in the coordinates of an explicit feature dictionary."""
        return np.asarray(v_hat) @ eval_matrix(dictionary, self.centers).T


# Linear algebra

def pinv(M, cutoff=pinv_cutoff):
    """SVD pseudoinverse zeroing singular values below cutoff * s_max; returns (M^+, rank)."""
    U, s, Vh = linalg.svd(np.atleast_2d(M), full_matrices=False)
    keep = s > cutoff * s[0] if s.size and s[0] > 0 else np.zeros(s.shape, dtype=bool)
    inverse = (Vh[keep].T / s[keep]) @ U[:, keep].T
    return inverse, int(keep.sum())


def _condition(s):
    return float(s[0] / s[-1]) if s[-1] > 0 else float('inf')


def _blocks(pairs, dictionary):
    for start in range(0, pairs.m, accumulate_block):
        stop = start + accumulate_block
        yield eval_matrix(dictionary, pairs.X[:, start:stop]), eval_matrix(dictionary, pairs.Y[:, start:stop])


def _sums(pairs, dictionary):
    """Compensated sums of Psi(y) Psi(x)^T and Psi(x) Psi(x)^T over the pairs."""
    k = dictionary.k
    S_A, S_G = np.zeros((k, k)), np.zeros((k, k))
    c_A, c_G = np.zeros((k, k)), np.zeros((k, k))
    for psi_x, psi_y in _blocks(pairs, dictionary):
        for S, c, term in ((S_A, c_A, psi_y @ psi_x.T), (S_G, c_G, psi_x @ psi_x.T)):
            y = term - c
            t = S + y
            c[:] = (t - S) - y
            S[:] = t
    return S_A, S_G


def _right_divide(S, S_G, cutoff):
    """S S_G^+, exact column scaling when S_G is diagonal (indicator dictionaries)."""
    diagonal = np.diag(S_G)
    if np.count_nonzero(S_G - np.diag(diagonal)) == 0:
        nonzero = diagonal > 0
        out = np.zeros_like(S)
        out[:, nonzero] = S[:, nonzero] / diagonal[nonzero]
        return out, int(nonzero.sum())
    inverse, rank = pinv(S_G, cutoff)
    return S @ inverse, rank


def _residual(M_K, pairs, dictionary):
    total = 0.0
    for psi_x, psi_y in _blocks(pairs, dictionary):
        total += np.sum((psi_y - M_K @ psi_x) ** 2)
    return float(np.sqrt(total))


def _check(pairs, dictionary):
    if pairs.d != dictionary.dim:
        raise EstimationError(f"pairs have dimension {pairs.d}, dictionary expects {dictionary.dim}")


# Estimators

def ulam_estimate(pairs, boxes):
    if pairs.d != boxes.dim:
        raise EstimationError(f"pairs have dimension {pairs.d}, partition has {boxes.dim}")
    ix = boxes.box_index(pairs.X)
    if np.any(ix < 0):
        raise EstimationError(f"{int(np.sum(ix < 0))} X points lie outside the partition domain")
    iy = boxes.box_index(pairs.Y)
    inside = iy >= 0
    k = boxes.k
    counts = np.bincount(ix[inside] * k + iy[inside], minlength=k * k).reshape(k, k)
    totals = counts.sum(axis=1)

    # Rows without in-domain images are absorbing
    empty = np.flatnonzero(totals == 0)
    P = np.zeros((k, k))
    filled = totals > 0
    P[filled] = counts[filled] / totals[filled, None]
    P[empty, empty] = 1.0
    if empty.size:
        warnings.warn(f"{empty.size} of {k} boxes have no in-domain transitions; unit diagonal rows used",
                      NumericalWarning, stacklevel=2)
    escaped = int(np.sum(~inside))
    if escaped:
        warnings.warn(f"{escaped} images left the partition domain and are not counted",
                      NumericalWarning, stacklevel=2)
    return TransferMatrix(P, counts, boxes, totals, tuple(empty.tolist()))


def edmd(pairs, dictionary, formulation='pseudoinverse', cutoff=pinv_cutoff):
    """Least-squares Koopman matrix M_K = K^T with Psi_Y ~ M_K Psi_X.

    'pseudoinverse' computes Psi_Y Psi_X^+ from an SVD of Psi_X, 'normal-equations'
    computes A G^+ from the averaged sums A and G. Both store A and G.
    A diagonal Gram (indicators, d = 1 identity) always takes the A G^+ route,
    and `formulation` on the result names the route that ran.
    """
    _check(pairs, dictionary)
    if formulation not in ('pseudoinverse', 'normal-equations'):
        raise EstimationError(f"unknown EDMD formulation '{formulation}'")
    S_A, S_G = _sums(pairs, dictionary)
    s = linalg.svdvals(S_G)
    cond = _condition(s)

    diagonal = np.count_nonzero(S_G - np.diag(np.diag(S_G))) == 0
    if formulation == 'normal-equations' or diagonal:
        M_K, rank = _right_divide(S_A, S_G, cutoff)
        formulation = 'normal-equations'
    else:
        psi_x = eval_matrix(dictionary, pairs.X)
        psi_y = eval_matrix(dictionary, pairs.Y)
        inverse, rank = pinv(psi_x, cutoff)
        M_K = psi_y @ inverse

    if rank < dictionary.k:
        warnings.warn(f"G is rank deficient (rank {rank} of {dictionary.k}); small singular values were zeroed",
                      NumericalWarning, stacklevel=2)
    return EdmdResult(M_K, S_A / pairs.m, S_G / pairs.m, _residual(M_K, pairs, dictionary),
                      dictionary, pairs.m, rank, cond, formulation)


def dmd(pairs, cutoff=pinv_cutoff):
    return edmd(pairs, Dictionary.identity(pairs.d), 'pseudoinverse', cutoff)


def kernel_edmd(pairs, p=2, cutoff=kernel_cutoff):
    """EDMD through the polynomial kernel (1 + x.y)^p without explicit features.

    A_hat[i, j] = f(x_i, y_j), G_hat[i, j] = f(x_i, x_j), M_hat = A_hat G_hat^+.
    """
    if p < 1:
        raise EstimationError(f"kernel degree must be >= 1, got {p}")
    X, Y = pairs.X.T, pairs.Y.T
    A_hat = sk_polynomial_kernel(X, Y, degree=p, gamma=1.0, coef0=1.0)
    G_hat = sk_polynomial_kernel(X, X, degree=p, gamma=1.0, coef0=1.0)
    G_hat = (G_hat + G_hat.T) / 2

    w, U = linalg.eigh(G_hat)
    scale = max(np.max(np.abs(w)), np.finfo(float).tiny)
    if w[0] < -cutoff * scale:
        warnings.warn(f"kernel Gram matrix is indefinite (smallest eigenvalue {w[0]:.3e})",
                      NumericalWarning, stacklevel=2)
    keep = w > cutoff * scale
    rank = int(keep.sum())
    if rank < min(pairs.m, comb(pairs.d + p, p)):
        warnings.warn(f"kernel Gram matrix is ill-conditioned; {pairs.m - rank} eigenvalues cut off",
                      NumericalWarning, stacklevel=2)
    G_pinv = (U[:, keep] / w[keep]) @ U[:, keep].T
    return KernelEdmdResult(A_hat, G_hat, A_hat @ G_pinv, pairs.X.copy(), int(p), rank)


def pf_edmd(pairs, dictionary, formulation='normal-equations', cutoff=pinv_cutoff):
    """Perron-Frobenius matrix M_P = A^T G^+ alongside the EDMD Koopman matrix."""
    result = edmd(pairs, dictionary, formulation, cutoff)
    M_P, _ = _right_divide(result.A.T, result.G, cutoff)
    return EdmdResult(result.M_K, result.A, result.G, result.residual, dictionary, result.m,
                      result.rank, result.cond, result.formulation, M_P)


def adjoint_pf(result):
    """P_mu = G^-1 A, acting on coefficient vectors from the left."""
    if result.rank < result.k or not np.isfinite(result.cond):
        raise EstimationError("G is singular; use pf_edmd, which works with the pseudoinverse")
    try:
        return linalg.solve(result.G, result.A, assume_a='pos')
    except linalg.LinAlgError as error:
        raise EstimationError(f"G is not positive definite ({error}); use pf_edmd instead") from error


def residual(result, pairs, dictionary):
    """||Psi_Y - K^T Psi_X||_F.

    A large value means the dictionary cannot represent the eigenfunctions well.
    A dictionary of constants alone always gives 0.
    """
    _check(pairs, dictionary)
    return _residual(result.M_K, pairs, dictionary)


# Ergodic averages

def _values(fn, states):
    return fn(states) if callable(fn) else np.asarray(fn)[states]


def pair_time_average(orbit, phi, psi, batches=batch_count):
    """Time average of phi(x_n) psi(x_{n+1}) over one orbit with a batch-means standard error."""
    orbit = np.asarray(orbit)
    values = _values(phi, orbit[:-1]) * _values(psi, orbit[1:])
    batch_means = np.array([b.mean() for b in np.array_split(values, batches)])
    return float(values.mean()), float(batch_means.std(ddof=1) / np.sqrt(batches))


def pair_expectation(T, f, phi, psi):
    """<psi, P(phi f)> for a finite chain with transition matrix T and density f."""
    T = np.asarray(T, dtype=float)
    return float(np.asarray(psi) @ (T.T @ (np.asarray(phi) * np.asarray(f))))


# Files

@contextmanager
def atomic_write(path, binary=False):
    """Write to a temporary file next to path and rename it into place on success."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix='.' + os.path.basename(path), suffix='.tmp')
    try:
        if binary:
            handle = os.fdopen(fd, 'wb')
        else:
            handle = os.fdopen(fd, 'w', encoding='utf-8', newline='')
        with handle:
            yield handle
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_pairs(pairs, path):
    columns = [f'x_{i + 1}' for i in range(pairs.d)] + [f'y_{i + 1}' for i in range(pairs.d)]
    df = pd.DataFrame(np.vstack([pairs.X, pairs.Y]).T, columns=columns)
    with atomic_write(path) as handle:
        handle.write(f'# d={pairs.d} m={pairs.m}\n')
        df.to_csv(handle, index=False, header=False, float_format=f'%.{csv_digits}g')


def load_pairs(path):
    with open(path, encoding='utf-8') as handle:
        header = handle.readline().lstrip('#').split()
    try:
        sizes = dict(item.split('=') for item in header)
        d, m = int(sizes['d']), int(sizes['m'])
    except (ValueError, KeyError) as error:
        raise EstimationError(f"{path}: expected a '# d=<d> m=<m>' header") from error
    values = pd.read_csv(path, comment='#', header=None, float_precision='round_trip').values.astype(float)
    if values.shape != (m, 2 * d):
        raise EstimationError(f"{path}: header says {m} x {2 * d}, found {values.shape[0]} x {values.shape[1]}")
    return TrajectoryPairs(values[:, :d].T, values[:, d:].T, {'source': path})


def write_matrix(M, path, fmt='csv'):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if fmt == 'binary':
        with atomic_write(path, binary=True) as handle:
            handle.write(binary_magic)
            handle.write(np.array(M.shape, dtype='<u4').tobytes())
            handle.write(np.ascontiguousarray(M, dtype='<f8').tobytes())
        return
    with atomic_write(path) as handle:
        pd.DataFrame(M).to_csv(handle, index=False, header=False, float_format=f'%.{csv_digits}g')


def read_matrix(path):
    with open(path, 'rb') as handle:
        head = handle.read(len(binary_magic))
        if head == binary_magic:
            rows, cols = np.frombuffer(handle.read(8), dtype='<u4')
            values = np.frombuffer(handle.read(), dtype='<f8')
            if values.size != rows * cols:
                raise EstimationError(f"{path}: truncated matrix, expected {rows} x {cols} values")
            return values.reshape(rows, cols).copy()
    return pd.read_csv(path, header=None, float_precision='round_trip').values.astype(float)


def write_triplets(transfer, path):
    i, j = np.nonzero(transfer.counts)
    df = pd.DataFrame({'i': i, 'j': j, 'count': transfer.counts[i, j], 'p': transfer.P[i, j]})
    with atomic_write(path) as handle:
        df.to_csv(handle, index=False, float_format=f'%.{csv_digits}g')


if __name__ == "__main__":
    '''Command: python3 estimators.py <pairs.csv> <monomial_degree> <output.csv>'''
    pairs_file = sys.argv[1]
    degree = int(sys.argv[2])
    output_file = sys.argv[3]

    print("[Read Pairs] ...", end='\r')
    pairs = load_pairs(pairs_file)
    print(f"[Read Pairs] d = {pairs.d}, m = {pairs.m}                 ")

    print("[EDMD] ...", end='\r')
    result = edmd(pairs, Dictionary.monomials(pairs.d, degree=degree))
    write_matrix(result.M_K, output_file)
    print(f"[EDMD] k = {result.k}, residual = {result.residual:.3e}                 ")
