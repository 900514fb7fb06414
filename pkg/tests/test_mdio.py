import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from scipy.spatial.transform import Rotation

from dictionaries import Dictionary
from dynamics import IntegratorConfig, SampleDesign, build_system, generate_pairs
from estimators import TrajectoryPairs, edmd
from mdio import (DihedralError, DihedralSpec, ObservableSeries, PositionTrajectory, TrajectoryParseError,
                  dihedral_series, pairs_from_series, read_series, read_xyz, write_series, write_xyz)
from spectral import generalized_eig


TWO_FRAMES = """2
first frame
C 0.0 0.0 0.0
H 1.0 0.0 0.0
2
second frame
C 0.0 0.0 0.1
H 1.0 0.5 0.0
"""


def frames(*positions):
    return PositionTrajectory(np.array(positions, dtype=float), ('C', 'C', 'C', 'C'))


def write(tmp_path, text):
    path = tmp_path / 'traj.xyz'
    path.write_text(text)
    return path


# XYZ files

def test_read_xyz(tmp_path):
    traj = read_xyz(write(tmp_path, TWO_FRAMES))
    assert traj.positions.shape == (2, 2, 3)
    assert traj.elements == ('C', 'H')
    assert traj.comments == ('first frame', 'second frame')
    assert_allclose(traj.positions[1, 1], [1.0, 0.5, 0.0])


def test_read_xyz_stride(tmp_path):
    traj = read_xyz(write(tmp_path, TWO_FRAMES * 2), stride=2)
    assert traj.n_frames == 2 and traj.stride == 2
    assert_allclose(traj.positions[1], traj.positions[0])


def test_empty_file_has_no_frames(tmp_path):
    with pytest.raises(TrajectoryParseError, match='no frames'):
        read_xyz(write(tmp_path, ''))


def test_truncated_frame_reports_the_line(tmp_path):
    text = '\n'.join(TWO_FRAMES.splitlines()[:7]) + '\n'
    with pytest.raises(TrajectoryParseError, match=r':8: frame 2 ended after 1 of 2 atoms'):
        read_xyz(write(tmp_path, text))


def test_atom_count_mismatch(tmp_path):
    text = TWO_FRAMES.replace('2\nsecond', '3\nsecond')
    with pytest.raises(TrajectoryParseError, match='frame 2 has 3 atoms, expected 2'):
        read_xyz(write(tmp_path, text))


def test_malformed_coordinate_reports_the_line(tmp_path):
    with pytest.raises(TrajectoryParseError, match=r':4: malformed coordinate'):
        read_xyz(write(tmp_path, TWO_FRAMES.replace('H 1.0 0.0 0.0', 'H 1.0 zero 0.0')))


def test_write_xyz_keeps_positions(tmp_path, rng):
    traj = PositionTrajectory(rng.standard_normal((3, 4, 3)), ('C', 'C', 'C', 'C'), comments=('a', 'b', 'c'))
    path = tmp_path / 'out.xyz'
    write_xyz(traj, path)
    back = read_xyz(path)
    assert_array_equal(back.positions, traj.positions)
    assert back.comments == ('a', 'b', 'c')


# Dihedrals

I, J, K = (1.0, 0.0, 0.0), (0.0, 0.0, 0.0), (0.0, 0.0, 1.0)
SPEC = DihedralSpec(0, 1, 2, 3)


@pytest.mark.parametrize('l, expected', [
    ((1.0, 0.0, 1.0), 0.0),
    ((-1.0, 0.0, 1.0), np.pi),
    ((0.0, 1.0, 1.0), np.pi / 2),
])
def test_reference_dihedrals(l, expected):
    series = dihedral_series(frames([I, J, K, l]), SPEC)
    assert series.values[0] == pytest.approx(expected, abs=1e-12)


def test_cosine_matches_plane_normals(rng):
    positions = rng.standard_normal((20, 4, 3))
    phi = dihedral_series(frames(*positions), SPEC).values
    assert np.all((phi >= 0) & (phi < 2 * np.pi))
    b0 = positions[:, 1] - positions[:, 0]
    b1 = positions[:, 2] - positions[:, 1]
    b2 = positions[:, 3] - positions[:, 2]
    n1, n2 = np.cross(b0, b1), np.cross(b1, b2)
    cos = np.sum(n1 * n2, axis=1) / (np.linalg.norm(n1, axis=1) * np.linalg.norm(n2, axis=1))
    assert_allclose(np.cos(phi), cos, atol=1e-12)


def test_rigid_motion_invariance(rng):
    positions = rng.standard_normal((10, 4, 3))
    moved = Rotation.from_rotvec([0.3, -1.2, 0.7]).apply(positions.reshape(-1, 3)).reshape(positions.shape) + 2.5
    a = dihedral_series(frames(*positions), SPEC).values
    b = dihedral_series(frames(*moved), SPEC).values
    assert_allclose(np.exp(1j * a), np.exp(1j * b), atol=1e-10)


def test_collinear_atoms_are_rejected():
    traj = frames([I, J, K, (1.0, 0.0, 1.0)], [J, K, (0.0, 0.0, 2.0), (0.0, 0.0, 3.0)])
    with pytest.raises(DihedralError, match='frame 1'):
        dihedral_series(traj, SPEC)


def test_dihedral_spec_validation():
    assert DihedralSpec.parse('0, 1, 2, 3').atoms == (0, 1, 2, 3)
    with pytest.raises(DihedralError):
        DihedralSpec.parse('0,1,2')
    with pytest.raises(DihedralError):
        DihedralSpec(0, 0, 1, 2)
    with pytest.raises(DihedralError):
        dihedral_series(frames([I, J, K, I]), DihedralSpec(0, 1, 2, 4))


# Series and pairs

def test_pairs_from_series():
    series = ObservableSeries([0.1, 0.2, 0.3, 0.4])
    pairs = pairs_from_series(series)
    assert_allclose(pairs.X, [[0.1, 0.2, 0.3]])
    assert_allclose(pairs.Y, [[0.2, 0.3, 0.4]])
    assert pairs_from_series(series, lag=3).m == 1
    with pytest.raises(ValueError):
        pairs_from_series(series, lag=4)
    with pytest.raises(ValueError):
        pairs_from_series(series, lag=0)


def test_reversible_pairs():
    pairs = pairs_from_series(ObservableSeries([0.1, 0.2, 0.3, 0.4]), reversible=True)
    assert pairs.m == 6
    assert_array_equal(pairs.X[:, 3:], pairs.Y[:, :3])
    assert_array_equal(pairs.Y[:, 3:], pairs.X[:, :3])


def test_angles_must_be_reduced():
    with pytest.raises(ValueError):
        ObservableSeries([0.0, 2 * np.pi])


def test_series_file(tmp_path):
    series = ObservableSeries([0.5, 1.5, 6.0], stride=10)
    path = tmp_path / 'series.csv'
    write_series(series, path)
    assert path.read_text().splitlines()[0] == 'frame,angle_rad'
    back = read_series(path)
    assert back.stride == 10
    assert_array_equal(back.values, series.values)


def test_series_file_keeps_every_bit(tmp_path, rng):
    series = ObservableSeries(rng.uniform(0, 2 * np.pi, 500))
    write_series(series, tmp_path / 'series.csv')
    assert_array_equal(read_series(tmp_path / 'series.csv').values, series.values)


def test_fourier_estimate_ignores_full_turns(rng):
    X = rng.uniform(0, 2 * np.pi, (1, 200))
    Y = np.mod(X + rng.normal(0, 0.3, X.shape), 2 * np.pi)
    dictionary = Dictionary.fourier(3)
    a = edmd(TrajectoryPairs(X, Y), dictionary)
    b = edmd(TrajectoryPairs(X + 2 * np.pi, Y - 2 * np.pi), dictionary)
    assert_allclose(a.M_K, b.M_K, atol=1e-10)


def test_circle_series_pipeline():
    design = SampleDesign('single-orbit', (0.0,), (2 * np.pi,), length=3000)
    pairs = generate_pairs(build_system('circle-3well'), design, IntegratorConfig(1e-3, 100, seed=5))
    series = ObservableSeries(np.append(pairs.X[0], pairs.Y[0, -1]))
    result = edmd(pairs_from_series(series, reversible=True), Dictionary.fourier(5))
    spec = generalized_eig(result.A, result.G)
    assert np.all(spec.eigenvalues.imag == 0)
    assert abs(spec.eigenvalues[0] - 1.0) < 1e-2
