# -------------------------

phase_tolerance = 1e-8 # entries smaller than this times the largest are skipped when fixing the phase
order_digits = 12 # eigenvalues are compared after rounding to this many decimals
cond_limit = 1e12 # eigenvector matrices beyond this condition number are not inverted
gram_cond_limit = 1e12 # generalized_eig falls back to the pseudoinverse beyond this
symmetry_tolerance = 1e-12

# -------------------------

import sys
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
import pandas as pd
from scipy import linalg

from dictionaries import Dictionary, StateSelector, eval_matrix
from estimators import NumericalWarning, atomic_write, pinv, read_matrix, csv_digits


class SpectralError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class SpectralResult:
    """Eigenvalues ordered by descending modulus, then real part, then imaginary part.

    `left` holds the left eigenvectors as rows (xi_i M = lambda_i xi_i), `right` the
    right eigenvectors as columns. Both are unit norm with the first nonzero entry
    positive real.
    """
    eigenvalues: np.ndarray
    left: np.ndarray
    right: np.ndarray
    source: str = 'matrix'
    kind: str = 'koopman'

    @property
    def k(self):
        return self.eigenvalues.size

    def take(self, count):
        count = min(int(count), self.k)
        return SpectralResult(self.eigenvalues[:count], self.left[:count], self.right[:, :count],
                              self.source, self.kind)


@dataclass(frozen=True)
class EigenfunctionSet:
    """phi_i = coefficients[i] . Psi."""
    coefficients: np.ndarray
    dictionary: Dictionary
    eigenvalues: np.ndarray
    kind: str = 'koopman'

    def __call__(self, points):
        return evaluate(self, points)


@dataclass(frozen=True)
class KoopmanModeSet:
    V: np.ndarray
    eigenvalues: np.ndarray
    selector: StateSelector


def _order(w):
    return np.lexsort((-w.imag, -np.round(w.real, order_digits), -np.round(np.abs(w), order_digits)))


def _normalize(vectors, axis):
    vectors = np.array(vectors, dtype=complex)
    lines = vectors if axis == 1 else vectors.T
    for line in lines:
        norm = np.linalg.norm(line)
        if norm == 0:
            continue
        line /= norm
        magnitude = np.abs(line)
        first = np.flatnonzero(magnitude > phase_tolerance * magnitude.max())[0]
        line *= np.conj(line[first]) / magnitude[first]
        line[first] = magnitude[first]
    return vectors


def _finish(w, left, right, source, kind):
    order = _order(w)
    return SpectralResult(w[order], _normalize(left[order], axis=1), _normalize(right[:, order], axis=0),
                          source, kind)


def schur_diagnostics(M):
    """Condition of the eigenvector matrix and departure from normality of the Schur form."""
    T, _ = linalg.schur(np.asarray(M, dtype=float), output='complex')
    departure = np.linalg.norm(np.triu(T, 1))
    try:
        _, vr = linalg.eig(M)
        cond = float(np.linalg.cond(vr))
    except linalg.LinAlgError:
        cond = float('inf')
    return {'eigenvector_cond': cond, 'departure_from_normality': float(departure)}


def eig(M, source='matrix', kind='koopman'):
    M = np.atleast_2d(np.asarray(M))
    if M.shape[0] != M.shape[1] or not np.all(np.isfinite(M)):
        raise SpectralError(f"eig needs a finite square matrix, got shape {M.shape}")
    try:
        w, vl, vr = linalg.eig(M, left=True, right=True)
    except linalg.LinAlgError as error:
        raise SpectralError(f"eigensolver did not converge (cond = {np.linalg.cond(M):.3e})") from error
    return _finish(w, vl.conj().T, vr, source, kind)


def generalized_eig(A, G, source='pencil', kind='koopman'):
    """Left and right eigenvectors of the pencil (A, G): xi A = lambda xi G, A r = lambda G r.

    A symmetric with G positive definite uses the symmetric-definite solver, which
    returns a real spectrum. A near-singular G falls back to eig(A G^+); right vectors in the null
    space of G^+ are left as zero columns.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    G = np.atleast_2d(np.asarray(G, dtype=float))
    if A.shape != G.shape or A.shape[0] != A.shape[1]:
        raise SpectralError(f"pencil matrices differ in shape: {A.shape} and {G.shape}")
    scale = max(np.abs(G).max(), np.finfo(float).tiny)
    if np.abs(G - G.T).max() > symmetry_tolerance * scale:
        raise SpectralError("G must be symmetric")

    s = linalg.svdvals(G)
    if s[-1] == 0 or s[0] / s[-1] > gram_cond_limit:
        warnings.warn(f"G is near-singular (cond = {s[0] / s[-1] if s[-1] else float('inf'):.3e}); "
                      "using the pseudoinverse", NumericalWarning, stacklevel=2)
        G_pinv, _ = pinv(G)
        spec = eig(A @ G_pinv, source, kind)
        right = G_pinv @ spec.right
        right[:, np.linalg.norm(right, axis=0) <= phase_tolerance * np.linalg.norm(G_pinv, 2)] = 0
        return SpectralResult(spec.eigenvalues, spec.left, _normalize(right, axis=0), source, kind)

    if np.abs(A - A.T).max() <= symmetry_tolerance * max(np.abs(A).max(), np.finfo(float).tiny):
        try:
            w, V = linalg.eigh(A, G)
            return _finish(w.astype(complex), V.T, V, source, kind)
        except linalg.LinAlgError:
            pass

    try:
        w, vl, vr = linalg.eig(A, G, left=True, right=True, homogeneous_eigvals=True)
    except linalg.LinAlgError as error:
        raise SpectralError(f"QZ iteration did not converge: {error}") from error
    alpha, beta = w
    tiny = np.finfo(float).eps * max(np.abs(A).max(), scale)
    if np.any((np.abs(alpha) <= tiny) & (np.abs(beta) <= tiny)):
        raise SpectralError("singular pencil: A and G share a null vector")
    if np.any(beta == 0):
        raise SpectralError("pencil has infinite eigenvalues")
    return _finish(alpha / beta, vl.conj().T, vr, source, kind)


def eigenfunctions(spec, dictionary, side='left'):
    """Eigenfunction coefficients from the left (rows) or right (columns) eigenvectors."""
    if side not in ('left', 'right'):
        raise SpectralError(f"side must be 'left' or 'right', got '{side}'")
    coefficients = spec.left if side == 'left' else spec.right.T
    if coefficients.shape[1] != dictionary.k:
        raise SpectralError(f"{coefficients.shape[1]} coefficients per eigenfunction, dictionary has {dictionary.k}")
    return EigenfunctionSet(coefficients, dictionary, spec.eigenvalues, spec.kind)


def evaluate(funcs, points):
    return funcs.coefficients @ eval_matrix(funcs.dictionary, points)


def dual_basis(spec, G, m, dictionary=None, raw=False):
    """Coefficients of the eigenfunctions biorthogonal to the Koopman eigenfunctions.

    G is the averaged Gram matrix (1/m) Psi_X Psi_X^T, or the raw sum with raw=True.
    The result satisfies (1/m) (Xi~ Psi_X)(Xi Psi_X)^* = I.
    """
    G = np.asarray(G, dtype=float) / (m if raw else 1)
    Xi = spec.left
    cond = np.linalg.cond(Xi)
    if not np.isfinite(cond) or cond > cond_limit:
        raise SpectralError(f"eigenvector matrix is singular (cond = {cond:.3e}); "
                            "compute the dual basis from the generalized pencil (A, G) instead")
    try:
        dual = linalg.inv(G @ Xi.conj().T)
    except linalg.LinAlgError as error:
        raise SpectralError("G is singular; the dual basis does not exist") from error
    dictionary = dictionary if dictionary is not None else Dictionary('coefficients', 0, tuple(range(spec.k)))
    return EigenfunctionSet(dual, dictionary, np.conj(spec.eigenvalues), 'perron-frobenius')


def koopman_modes(spec, selector):
    """V = B Xi^-1, column i paired with eigenvalue i."""
    Xi = spec.left
    if Xi.shape[0] != Xi.shape[1]:
        raise SpectralError("Koopman modes need the full set of eigenvectors")
    cond = np.linalg.cond(Xi)
    if not np.isfinite(cond) or cond > cond_limit:
        raise SpectralError(f"eigenvector matrix is singular or defective (cond = {cond:.3e}); modes refused")
    return KoopmanModeSet(selector.B @ linalg.inv(Xi), spec.eigenvalues, selector)


def reconstruct(modes, funcs, x, steps=0):
    """sum_i lambda_i^n phi_i(x) v_i."""
    if steps < 0:
        raise SpectralError(f"steps must be >= 0, got {steps}")
    x = np.asarray(x, dtype=float)
    column = x.ndim == 1
    points = x[:, None] if column else x
    phi = evaluate(funcs, points)
    out = np.real(modes.V @ (modes.eigenvalues[:, None] ** steps * phi))
    return out[:, 0] if column else out


def grid_points(lower, upper, counts):
    axes = [np.linspace(lo, hi, int(n)) for lo, hi, n in zip(lower, upper, counts)]
    mesh = np.meshgrid(*axes, indexing='ij')
    return np.vstack([g.ravel() for g in mesh])


def eval_on_grid(funcs, lower, upper, counts, indices=None):
    points = grid_points(lower, upper, counts)
    indices = range(len(funcs.eigenvalues)) if indices is None else indices
    values = evaluate(funcs, points)
    coordinates = {f'x{j + 1}': points[j] for j in range(points.shape[0])}
    return {i: pd.DataFrame({**coordinates, 're_phi': values[i].real, 'im_phi': values[i].imag})
            for i in indices}


def invariant_density(spec, tolerance=1e-6):
    """Left eigenvector at lambda = 1 scaled to a nonnegative vector with unit sum."""
    i = int(np.argmin(np.abs(spec.eigenvalues - 1.0)))
    if abs(spec.eigenvalues[i] - 1.0) > tolerance:
        warnings.warn(f"no eigenvalue at 1 (closest {spec.eigenvalues[i]:.6g})", NumericalWarning, stacklevel=2)
    density = np.real(spec.left[i])
    density = density / density.sum()
    if density.min() < -tolerance:
        warnings.warn("invariant vector has entries of both signs", NumericalWarning, stacklevel=2)
    return np.clip(density, 0.0, None) / np.clip(density, 0.0, None).sum()


# Tables

def spectrum_table(spec):
    w = spec.eigenvalues
    return pd.DataFrame({'index': np.arange(1, w.size + 1), 're_lambda': w.real,
                         'im_lambda': w.imag, 'abs_lambda': np.abs(w)})


def modes_table(modes):
    w = modes.eigenvalues
    df = pd.DataFrame({'mode_index': np.arange(1, w.size + 1), 're_lambda': w.real, 'im_lambda': w.imag})
    for j in range(modes.V.shape[0]):
        df[f'v_{j + 1}'] = modes.V[j].real
    for j in range(modes.V.shape[0]):
        df[f'im_v_{j + 1}'] = modes.V[j].imag
    return df


def eigenvector_table(funcs):
    w = funcs.eigenvalues
    labels = funcs.dictionary.labels()
    df = pd.DataFrame({'index': np.arange(1, w.size + 1), 're_lambda': w.real, 'im_lambda': w.imag})
    re = pd.DataFrame(funcs.coefficients.real, columns=[f're_{label}' for label in labels])
    im = pd.DataFrame(funcs.coefficients.imag, columns=[f'im_{label}' for label in labels])
    return pd.concat([df, re, im], axis=1)


def write_table(df, path):
    with atomic_write(path) as handle:
        df.to_csv(handle, index=False, float_format=f'%.{csv_digits}g')


if __name__ == "__main__":
    '''Command: python3 spectral.py <matrix.csv> <spectrum.csv>'''
    matrix_file = sys.argv[1]
    spectrum_file = sys.argv[2]

    print("[Eigendecomposition] ...", end='\r')
    spec = eig(read_matrix(matrix_file))
    write_table(spectrum_table(spec), spectrum_file)
    print(f"[Eigendecomposition] k = {spec.k}, |lambda_1| = {abs(spec.eigenvalues[0]):.6f}                 ")
