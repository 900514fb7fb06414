# -------------------------

tps_centers_per_dim = 5 # default thin plate spline grid when no centers are given
gaussian_width = 0.5
kernel_degree = 2

# -------------------------

import sys
import itertools
from dataclasses import dataclass, field
from math import factorial

import numpy as np
import pandas as pd
from scipy.spatial.distance import cdist
from sklearn.metrics.pairwise import polynomial_kernel as sk_polynomial_kernel


class DictionaryError(ValueError):
    pass


@dataclass(frozen=True)
class BoxPartition:
    """Uniform box covering of an axis-aligned domain.

    Boxes are numbered in C order over the per-dimension box counts, so the last
    coordinate varies fastest. Every box is left-closed, the last box in each
    dimension is also right-closed.
    """
    lower: tuple
    upper: tuple
    counts: tuple

    def __post_init__(self):
        lower = tuple(float(v) for v in np.atleast_1d(self.lower))
        upper = tuple(float(v) for v in np.atleast_1d(self.upper))
        counts = tuple(int(v) for v in np.atleast_1d(self.counts))
        if not (len(lower) == len(upper) == len(counts)) or len(lower) == 0:
            raise DictionaryError("lower, upper and counts must have the same non-zero length")
        if any(hi <= lo for lo, hi in zip(lower, upper)):
            raise DictionaryError(f"empty domain {lower} .. {upper}")
        if any(n < 1 for n in counts):
            raise DictionaryError(f"box counts must be positive, got {counts}")
        object.__setattr__(self, 'lower', lower)
        object.__setattr__(self, 'upper', upper)
        object.__setattr__(self, 'counts', counts)

    @property
    def dim(self):
        return len(self.counts)

    @property
    def k(self):
        return int(np.prod(self.counts))

    @property
    def widths(self):
        return (np.array(self.upper) - np.array(self.lower)) / np.array(self.counts)

    @property
    def box_measure(self):
        return float(np.prod(self.widths))

    def box_index(self, points):
        """Box number of every column of a d x m array, -1 outside the closed domain."""
        points = _as_points(points, self.dim)
        lower = np.array(self.lower)[:, None]
        upper = np.array(self.upper)[:, None]
        counts = np.array(self.counts)[:, None]
        inside = np.all((points >= lower) & (points <= upper), axis=0)
        cell = np.floor((points - lower) / self.widths[:, None]).astype(np.int64)
        cell = np.clip(cell, 0, counts - 1)
        index = np.ravel_multi_index(tuple(cell), self.counts)
        return np.where(inside, index, -1)

    def box_bounds(self, i):
        cell = np.array(np.unravel_index(i, self.counts))
        lo = np.array(self.lower) + cell * self.widths
        return lo, lo + self.widths

    def centers(self):
        axes = [lo + (np.arange(n) + 0.5) * w
                for lo, n, w in zip(self.lower, self.counts, self.widths)]
        grid = np.meshgrid(*axes, indexing='ij')
        return np.vstack([g.ravel() for g in grid])


@dataclass(frozen=True)
class Dictionary:
    """Ordered family of scalar basis functions psi_1 ... psi_k.

    `terms` holds one descriptor per basis function: exponent tuples for the
    polynomial families, frequencies for fourier, center indices for the radial
    and kernel families.
    """
    family: str
    dim: int
    terms: tuple
    params: dict = field(default_factory=dict, compare=False)

    @property
    def k(self):
        return len(self.terms)

    # Constructors

    @classmethod
    def indicators(cls, boxes):
        return cls('indicators', boxes.dim, tuple(range(boxes.k)), {'boxes': boxes})

    @classmethod
    def monomials(cls, dim, degree=None, max_per_dim=None):
        """Monomials in graded lexicographic order.

        `degree` bounds the total degree, `max_per_dim` bounds every exponent
        separately (an int or one bound per dimension). At least one is required.
        """
        if degree is None and max_per_dim is None:
            raise DictionaryError("monomials need a total degree or a per-dimension maximum")
        if max_per_dim is None:
            bounds = (int(degree),) * dim
        else:
            bounds = tuple(int(b) for b in np.broadcast_to(max_per_dim, (dim,)))
        exponents = [e for e in itertools.product(*(range(b + 1) for b in bounds))
                     if degree is None or sum(e) <= degree]
        exponents.sort(key=lambda e: (sum(e), tuple(-v for v in e)))
        return cls('monomials', dim, tuple(exponents),
                   {'degree': degree, 'max_per_dim': max_per_dim})

    @classmethod
    def poly_features(cls, dim, p):
        """Monomials of total degree <= p weighted so that Psi(x).Psi(y) = (1 + x.y)^p."""
        base = cls.monomials(dim, degree=p)
        weights = []
        for e in base.terms:
            rest = p - sum(e)
            coefficient = factorial(p) / (factorial(rest) * np.prod([factorial(v) for v in e]))
            weights.append(np.sqrt(coefficient))
        return cls('poly-features', dim, base.terms, {'degree': p, 'weights': np.array(weights)})

    @classmethod
    def fourier(cls, frequency):
        """1, cos(x), sin(x), ..., cos(Kx), sin(Kx) on [0, 2 pi]."""
        terms = [(0, 'const')]
        for i in range(1, int(frequency) + 1):
            terms += [(i, 'cos'), (i, 'sin')]
        return cls('fourier', 1, tuple(terms), {'frequency': int(frequency)})

    @classmethod
    def thin_plate(cls, centers=None, lower=None, upper=None, per_dim=tps_centers_per_dim):
        """r^2 ln r around each center (columns of a d x c matrix); a uniform grid by default."""
        if centers is None:
            if lower is None or upper is None:
                raise DictionaryError("thin plate splines need centers or a domain")
            centers = _grid(lower, upper, per_dim)
        centers = np.atleast_2d(np.asarray(centers, dtype=float))
        return cls('thin-plate', centers.shape[0], tuple(range(centers.shape[1])), {'centers': centers})

    @classmethod
    def gaussians(cls, centers=None, width=gaussian_width, lower=None, upper=None, per_dim=tps_centers_per_dim):
        if centers is None:
            if lower is None or upper is None:
                raise DictionaryError("gaussians need centers or a domain")
            centers = _grid(lower, upper, per_dim)
        centers = np.atleast_2d(np.asarray(centers, dtype=float))
        if width <= 0:
            raise DictionaryError(f"gaussian width must be positive, got {width}")
        return cls('gaussians', centers.shape[0], tuple(range(centers.shape[1])),
                   {'centers': centers, 'width': float(width)})

    @classmethod
    def identity(cls, dim):
        return cls('identity', dim, tuple(range(dim)))

    @classmethod
    def kernel_sections(cls, centers, p=kernel_degree):
        """psi_i(x) = (1 + x_i.x)^p for the data points x_i (columns of centers)."""
        centers = np.atleast_2d(np.asarray(centers, dtype=float))
        return cls('kernel-sections', centers.shape[0], tuple(range(centers.shape[1])),
                   {'centers': centers, 'degree': int(p)})

    # Evaluation

    def __call__(self, points):
        return eval_matrix(self, points)

    def labels(self):
        names = [f'x{i + 1}' for i in range(self.dim)]
        if self.family in ('monomials', 'poly-features'):
            labels = []
            for e in self.terms:
                factors = [n if v == 1 else f'{n}^{v}' for n, v in zip(names, e) if v > 0]
                labels.append('*'.join(factors) if factors else '1')
            return labels
        if self.family == 'fourier':
            return ['1' if kind == 'const' else f'{kind}({i}x)' for i, kind in self.terms]
        if self.family == 'identity':
            return names
        if self.family == 'indicators':
            return [f'box{i}' for i in self.terms]
        return [f'{self.family}{i}' for i in self.terms]


@dataclass(frozen=True)
class StateSelector:
    """Matrix B with g = B Psi for the full-state observable g(x) = x."""
    B: np.ndarray

    @property
    def dim(self):
        return self.B.shape[0]


def eval_vector(dictionary, x):
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.size != dictionary.dim:
        raise DictionaryError(f"state has dimension {x.size}, dictionary expects {dictionary.dim}")
    return eval_matrix(dictionary, x[:, None])[:, 0]


def eval_matrix(dictionary, points):
    points = _as_points(points, dictionary.dim)
    if points.shape[1] < 1:
        raise DictionaryError("at least one point is required")
    family = dictionary.family

    if family == 'identity':
        return points.copy()

    if family == 'indicators':
        boxes = dictionary.params['boxes']
        index = boxes.box_index(points)
        psi = np.zeros((boxes.k, points.shape[1]))
        inside = index >= 0
        psi[index[inside], np.flatnonzero(inside)] = 1.0
        return psi

    if family in ('monomials', 'poly-features'):
        exponents = np.array(dictionary.terms, dtype=float)
        psi = np.prod(points[None, :, :] ** exponents[:, :, None], axis=1)
        if family == 'poly-features':
            psi *= dictionary.params['weights'][:, None]
        return psi

    if family == 'fourier':
        x = points[0]
        rows = []
        for i, kind in dictionary.terms:
            if kind == 'const':
                rows.append(np.ones_like(x))
            elif kind == 'cos':
                rows.append(np.cos(i * x))
            else:
                rows.append(np.sin(i * x))
        return np.vstack(rows)

    if family == 'thin-plate':
        r2 = cdist(dictionary.params['centers'].T, points.T, 'sqeuclidean')
        # r^2 ln r -> 0 at r = 0
        with np.errstate(divide='ignore', invalid='ignore'):
            psi = 0.5 * r2 * np.log(r2)
        psi[r2 == 0] = 0.0
        return psi

    if family == 'gaussians':
        r2 = cdist(dictionary.params['centers'].T, points.T, 'sqeuclidean')
        return np.exp(-r2 / (2 * dictionary.params['width'] ** 2))

    if family == 'kernel-sections':
        return sk_polynomial_kernel(dictionary.params['centers'].T, points.T,
                                    degree=dictionary.params['degree'], gamma=1.0, coef0=1.0)

    raise DictionaryError(f"unknown dictionary family '{family}'")


def polynomial_kernel(p, x, y):
    """(1 + x.y)^p, the inner product of the poly-features dictionary of degree p."""
    if p < 1:
        raise DictionaryError(f"kernel degree must be >= 1, got {p}")
    x = np.asarray(x, dtype=float).reshape(-1)
    y = np.asarray(y, dtype=float).reshape(-1)
    return float((1.0 + x @ y) ** p)


def state_selector(dictionary):
    d = dictionary.dim
    B = np.zeros((d, dictionary.k))
    for j in range(d):
        if dictionary.family == 'identity':
            B[j, j] = 1.0
            continue
        if dictionary.family != 'monomials':
            raise DictionaryError(f"a {dictionary.family} dictionary does not contain the coordinate functions")
        unit = tuple(1 if i == j else 0 for i in range(d))
        if unit not in dictionary.terms:
            raise DictionaryError(f"dictionary does not contain the coordinate x{j + 1}")
        B[j, dictionary.terms.index(unit)] = 1.0
    return StateSelector(B)


def build_dictionary(spec, dim=None):
    spec = dict(spec)
    family = spec.pop('family')
    domain = spec.pop('domain', None) or {}
    if family == 'indicators':
        return Dictionary.indicators(BoxPartition(domain['lower'], domain['upper'], domain['counts']))
    if family == 'monomials':
        return Dictionary.monomials(dim or len(domain['lower']), degree=spec.get('degree'),
                                    max_per_dim=spec.get('max_per_dim'))
    if family == 'poly-features':
        return Dictionary.poly_features(dim, spec.get('degree', kernel_degree))
    if family == 'fourier':
        return Dictionary.fourier(spec['frequency'])
    if family == 'thin-plate':
        return Dictionary.thin_plate(spec.get('centers'), domain.get('lower'), domain.get('upper'),
                                     spec.get('per_dim', tps_centers_per_dim))
    if family == 'gaussians':
        return Dictionary.gaussians(spec.get('centers'), spec.get('width', gaussian_width),
                                    domain.get('lower'), domain.get('upper'),
                                    spec.get('per_dim', tps_centers_per_dim))
    if family == 'identity':
        return Dictionary.identity(dim)
    raise DictionaryError(f"unknown dictionary family '{family}'")


def psi_table(dictionary, points):
    return pd.DataFrame(eval_matrix(dictionary, points).T, columns=dictionary.labels())


def _grid(lower, upper, per_dim):
    axes = [np.linspace(lo, hi, per_dim) for lo, hi in zip(lower, upper)]
    grid = np.meshgrid(*axes, indexing='ij')
    return np.vstack([g.ravel() for g in grid])


def _as_points(points, dim):
    points = np.asarray(points, dtype=float)
    if points.ndim == 1:
        points = points.reshape(dim, -1) if dim > 1 else points[None, :]
    if points.shape[0] != dim:
        raise DictionaryError(f"points have dimension {points.shape[0]}, expected {dim}")
    return points


if __name__ == "__main__":
    '''Command: python3 dictionaries.py <points.csv> <family> [<degree>]'''
    points_file = sys.argv[1]
    family = sys.argv[2]
    points = pd.read_csv(points_file, comment='#', header=None, float_precision='round_trip').values.T
    spec = {'family': family}
    if len(sys.argv) > 3:
        spec['frequency' if family == 'fourier' else 'degree'] = int(sys.argv[3])

    print("[Evaluate Dictionary] ...", end='\r')
    dictionary = build_dictionary(spec, dim=points.shape[0])
    psi_table(dictionary, points).to_csv(sys.stdout, index=False, float_format='%.17g')
    print(f"[Evaluate Dictionary] k = {dictionary.k}                 ", file=sys.stderr)
