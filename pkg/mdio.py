# -------------------------

degenerate_norm = 1e-10 # plane normals shorter than this make the dihedral undefined

# -------------------------

import sys
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from estimators import TrajectoryPairs, atomic_write, csv_digits


class TrajectoryParseError(ValueError):
    pass


class DihedralError(ValueError):
    pass


@dataclass(frozen=True)
class PositionTrajectory:
    positions: np.ndarray # N x n_a x 3
    elements: tuple = ()
    stride: int = 1
    comments: tuple = field(default=(), repr=False)

    @property
    def n_frames(self):
        return self.positions.shape[0]

    @property
    def n_atoms(self):
        return self.positions.shape[1]


@dataclass(frozen=True)
class DihedralSpec:
    i: int
    j: int
    k: int
    l: int

    def __post_init__(self):
        atoms = (self.i, self.j, self.k, self.l)
        if len(set(atoms)) != 4 or min(atoms) < 0:
            raise DihedralError(f"dihedral needs four distinct non-negative atom indices, got {atoms}")

    @classmethod
    def parse(cls, text):
        try:
            return cls(*(int(v) for v in text.split(',')))
        except (TypeError, ValueError) as error:
            raise DihedralError(f"expected four comma separated atom indices, got '{text}'") from error

    @property
    def atoms(self):
        return (self.i, self.j, self.k, self.l)


@dataclass(frozen=True)
class ObservableSeries:
    """Angle per frame in [0, 2 pi); pairs are taken `lag` frames apart."""
    values: np.ndarray
    lag: int = 1
    stride: int = 1

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).reshape(-1)
        if np.any(values < 0) or np.any(values >= 2 * np.pi):
            raise ValueError("angles must lie in [0, 2 pi)")
        object.__setattr__(self, 'values', values)

    @property
    def n_frames(self):
        return self.values.size


def read_xyz(path, stride=1):
    """Frames of an (extended) XYZ file: count line, comment line, `element x y z` rows."""
    if stride < 1:
        raise TrajectoryParseError(f"stride must be >= 1, got {stride}")
    with open(path, encoding='utf-8') as handle:
        lines = handle.read().splitlines()

    frames, comments, elements = [], [], None
    n_atoms = None
    line = 0
    while line < len(lines):
        if not lines[line].strip():
            line += 1
            continue
        try:
            count = int(lines[line].split()[0])
        except ValueError:
            raise TrajectoryParseError(f"{path}:{line + 1}: expected an atom count, got '{lines[line].strip()}'")
        if n_atoms is None:
            n_atoms = count
        elif count != n_atoms:
            raise TrajectoryParseError(f"{path}:{line + 1}: frame {len(frames) + 1} has {count} atoms, expected {n_atoms}")
        if line + 1 >= len(lines):
            raise TrajectoryParseError(f"{path}:{line + 2}: frame {len(frames) + 1} has no comment line")
        comments.append(lines[line + 1])

        rows = lines[line + 2:line + 2 + count]
        frame = np.empty((count, 3))
        symbols = []
        for a, row in enumerate(rows):
            number = line + 3 + a
            parts = row.split()
            if len(parts) < 4:
                raise TrajectoryParseError(f"{path}:{number}: expected 'element x y z', got '{row.strip()}'")
            try:
                frame[a] = [float(v) for v in parts[1:4]]
            except ValueError:
                raise TrajectoryParseError(f"{path}:{number}: malformed coordinate in '{row.strip()}'")
            symbols.append(parts[0])
        if len(rows) < count:
            raise TrajectoryParseError(f"{path}:{line + 3 + len(rows)}: frame {len(frames) + 1} ended after "
                                       f"{len(rows)} of {count} atoms")
        if not np.all(np.isfinite(frame)):
            raise TrajectoryParseError(f"{path}:{line + 3}: frame {len(frames) + 1} has non-finite coordinates")
        elements = elements or tuple(symbols)
        frames.append(frame)
        line += 2 + count

    if not frames:
        raise TrajectoryParseError(f"{path}: no frames")
    positions = np.stack(frames)[::stride]
    return PositionTrajectory(positions, elements, stride, tuple(comments[::stride]))


def write_xyz(traj, path):
    elements = traj.elements or ('X',) * traj.n_atoms
    comments = traj.comments or ('',) * traj.n_frames
    with atomic_write(path) as handle:
        for frame, comment in zip(traj.positions, comments):
            handle.write(f'{traj.n_atoms}\n{comment}\n')
            for element, (x, y, z) in zip(elements, frame):
                handle.write(f'{element} {x:.{csv_digits}g} {y:.{csv_digits}g} {z:.{csv_digits}g}\n')


def dihedral_series(traj, spec, lag=1):
    """Signed dihedral atan2((n1 x n2).v_jk/|v_jk|, n1.n2) in [0, 2 pi) for every frame.

    n1 = v_ij x v_jk and n2 = v_lk x v_jk, so cos of the result equals
    n1.n2 / (|n1| |n2|).
    """
    if max(spec.atoms) >= traj.n_atoms:
        raise DihedralError(f"atom index {max(spec.atoms)} out of range for {traj.n_atoms} atoms")
    p = traj.positions
    v_ij = p[:, spec.j] - p[:, spec.i]
    v_jk = p[:, spec.k] - p[:, spec.j]
    v_lk = p[:, spec.k] - p[:, spec.l]
    n1 = np.cross(v_ij, v_jk)
    n2 = np.cross(v_lk, v_jk)

    bond = np.linalg.norm(v_jk, axis=1)
    bad = np.flatnonzero((np.linalg.norm(n1, axis=1) <= degenerate_norm)
                         | (np.linalg.norm(n2, axis=1) <= degenerate_norm) | (bond == 0))
    if bad.size:
        raise DihedralError(f"frame {bad[0]}: atoms {spec.atoms} are collinear, the dihedral is undefined")

    axis = v_jk / bond[:, None]
    phi = np.arctan2(np.sum(np.cross(n1, n2) * axis, axis=1), np.sum(n1 * n2, axis=1))
    phi = np.mod(phi, 2 * np.pi)
    phi[phi >= 2 * np.pi] = 0.0
    return ObservableSeries(phi, lag, traj.stride)


def pairs_from_series(series, lag=None, reversible=False):
    """Lagged pairs (z_t, z_{t+lag}) of a d = 1 series; reversible appends the swapped pairs."""
    lag = series.lag if lag is None else int(lag)
    if lag < 1 or lag >= series.n_frames:
        raise ValueError(f"lag {lag} needs 1 <= lag < {series.n_frames} frames")
    z = series.values
    pairs = TrajectoryPairs(z[None, :-lag], z[None, lag:], {'lag': lag, 'stride': series.stride})
    if reversible:
        pairs = TrajectoryPairs.concat(pairs, pairs.reversed())
    return pairs


def write_series(series, path):
    df = pd.DataFrame({'frame': np.arange(series.n_frames) * series.stride, 'angle_rad': series.values})
    with atomic_write(path) as handle:
        df.to_csv(handle, index=False, float_format=f'%.{csv_digits}g')


def read_series(path, lag=1):
    df = pd.read_csv(path, float_precision='round_trip')
    frames = df['frame'].values
    stride = int(frames[1] - frames[0]) if len(frames) > 1 else 1
    return ObservableSeries(df['angle_rad'].values, lag, stride)


if __name__ == "__main__":
    '''Command: python3 mdio.py <trajectory.xyz> <i,j,k,l> <stride> <series.csv>'''
    trajectory_file = sys.argv[1]
    spec = DihedralSpec.parse(sys.argv[2])
    stride = int(sys.argv[3])
    series_file = sys.argv[4]

    print("[Read Trajectory] ...", end='\r')
    traj = read_xyz(trajectory_file, stride)
    print(f"[Read Trajectory] {traj.n_frames} frames, {traj.n_atoms} atoms                 ")

    print("[Dihedral] ...", end='\r')
    series = dihedral_series(traj, spec)
    write_series(series, series_file)
    print("[Dihedral] Complete                 ")
