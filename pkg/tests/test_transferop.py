"""Run configs, the staged pipeline and the command line."""
import json
import os
import glob

import numpy as np
import pandas as pd
import pytest
import yaml
from numpy.testing import assert_allclose

import transferop
from dictionaries import BoxPartition
from estimators import read_matrix
from mdio import read_series
from spectral import eig
from transferop import ConfigError, RunConfig, compare, main, run


CONFIGS = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), 'configs')
EXAMPLE1_EIGENVALUES = (0.6, 0.4, 0.36, 0.24, 0.216, 0.16, 0.144, 0.1296)

LINEAR = {
    'seed': 1,
    'system': {'name': 'linear-example1'},
    'design': {'mode': 'uniform-domain', 'lower': [-1.0, -1.0], 'upper': [1.0, 1.0], 'total': 1000},
    'integrator': {'h': 1.0, 'n_steps': 1},
}


# =====================================================================
# Helpers
# =====================================================================

def config_path(name):
    return os.path.join(CONFIGS, f'{name}.yaml')


def run_config(name, out_dir, *args):
    assert main(['run', config_path(name), '--out-dir', str(out_dir), *args]) == 0
    return out_dir


def write_config(tmp_path, raw, name='custom'):
    path = tmp_path / f'{name}.yaml'
    path.write_text(yaml.safe_dump(raw))
    return str(path)


def spectrum(out_dir):
    df = pd.read_csv(out_dir / 'spectrum.csv')
    return df['re_lambda'].values + 1j * df['im_lambda'].values


def linear(**sections):
    raw = {key: dict(value) for key, value in LINEAR.items() if isinstance(value, dict)}
    raw['seed'] = LINEAR['seed']
    raw.update(sections)
    return raw


# =====================================================================
# Configs
# =====================================================================

@pytest.mark.parametrize('path', sorted(glob.glob(os.path.join(CONFIGS, '*.yaml'))))
def test_bundled_configs_validate(path):
    config = RunConfig.load(path)
    assert config.name == os.path.splitext(os.path.basename(path))[0]


def test_unknown_key_reports_its_path():
    raw = linear(estimator={'method': 'dmd'})
    raw['design']['per_bx'] = 3
    with pytest.raises(ConfigError, match=r'design\.per_bx: unknown key'):
        RunConfig.from_dict(raw)


def test_wrong_type_reports_its_path():
    raw = linear(estimator={'method': 'dmd'})
    raw['design']['total'] = 'many'
    with pytest.raises(ConfigError, match=r'design\.total: expected int'):
        RunConfig.from_dict(raw)


def test_exponent_strings_are_floats():
    raw = linear(estimator={'method': 'dmd', 'cutoff': '1e-10'})
    raw['integrator']['h'] = '1e-3'
    config = RunConfig.from_dict(raw)
    assert config.section('integrator')['h'] == 1e-3
    assert config.section('estimator')['cutoff'] == 1e-10


@pytest.mark.parametrize('changes, message', [
    ({'estimator': {}}, 'estimator.method: required'),
    ({'estimator': {'method': 'svd'}}, "'svd' is not one of"),
    ({'estimator': {'method': 'edmd'}}, 'dictionary.family: required'),
    ({'estimator': {'method': 'ulam'}, 'dictionary': {'family': 'monomials', 'degree': 2}}, 'indicators'),
    ({'estimator': {'method': 'pf-edmd'}, 'dictionary': {'family': 'monomials', 'degree': 2},
      'spectral': {'modes': True}}, 'spectral.modes'),
    ({'estimator': {'method': 'dmd'}, 'integrator': {'h': 0.1, 'n_steps': 1, 'lag': 0.1}}, 'exactly one'),
    ({'estimator': {'method': 'dmd'}, 'output': {'matrix_format': 'npy'}}, 'matrix_format'),
])
def test_cross_field_rules(changes, message):
    with pytest.raises(ConfigError, match=message):
        RunConfig.from_dict(linear(**changes))


def test_digest_follows_the_content():
    a = RunConfig.from_dict(linear(estimator={'method': 'dmd'}))
    b = RunConfig.from_dict(linear(estimator={'method': 'dmd'}))
    c = RunConfig.from_dict(linear(estimator={'method': 'dmd'}), {'seed': 2})
    assert a.digest == b.digest != c.digest
    assert c.seed == 2


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig.load(str(tmp_path / 'missing.yaml'))


# =====================================================================
# Linear map runs
# =====================================================================

@pytest.fixture(scope='module')
def example1_run(tmp_path_factory):
    return run_config('example1-edmd', tmp_path_factory.mktemp('example1'))


def test_example1_spectrum(example1_run):
    values = spectrum(example1_run)
    assert abs(values[0] - 1.0) < 1e-8
    assert_allclose(values[1:9].real, EXAMPLE1_EIGENVALUES, atol=1e-8)
    assert_allclose(values[1:9].imag, 0.0, atol=1e-8)


def test_example1_linear_eigenfunctions_on_the_grid(example1_run):
    second = pd.read_csv(example1_run / 'eigfun_2.csv')
    third = pd.read_csv(example1_run / 'eigfun_3.csv')
    assert_allclose(second['re_phi'], 0.8 * second['x1'] - 0.6 * second['x2'], atol=1e-6)
    assert_allclose(third['re_phi'], (2 * third['x1'] + third['x2']) / np.sqrt(5), atol=1e-6)


def test_example1_modes(example1_run):
    modes = pd.read_csv(example1_run / 'modes.csv')
    V = modes[['v_1', 'v_2']].values + 1j * modes[['im_v_1', 'im_v_2']].values
    lam = modes['re_lambda'].values
    i, j = np.argmin(np.abs(lam - 0.6)), np.argmin(np.abs(lam - 0.4))
    assert_allclose(V[i], [0.5, -1.0], atol=1e-6)
    assert_allclose(V[j], np.sqrt(5) / 2 * np.array([0.6, 0.8]), atol=1e-6)
    assert np.abs(np.delete(V, [i, j], axis=0)).max() < 1e-8


def test_example1_outputs(example1_run):
    for name in ('pairs.csv', 'matrix.csv', 'koopman.csv', 'A.csv', 'G.csv', 'spectrum.csv', 'eigenvectors.csv',
                 'modes.csv', 'dual.csv', 'eigfun_1.csv', 'eigfun_10.csv', 'report.json'):
        assert (example1_run / name).exists(), name
    grid = pd.read_csv(example1_run / 'eigfun_2.csv')
    assert len(grid) == 21 * 21
    report = json.loads((example1_run / 'report.json').read_text())
    assert report['seed'] == 1
    assert report['version'] == transferop.version
    assert len(report['config_hash']) == 64
    assert report['k'] == 36 and report['m'] == 1000
    assert report['wall_time'] >= 0
    assert report['warnings'] == []


def test_seed_does_not_move_exact_eigenvalues(example1_run, tmp_path):
    run_config('example1-edmd', tmp_path, '--seed', '2')
    assert_allclose(spectrum(tmp_path)[:9], spectrum(example1_run)[:9], atol=1e-8)
    assert json.loads((tmp_path / 'report.json').read_text())['seed'] == 2


def test_reused_pairs_reproduce_the_matrix(example1_run, tmp_path):
    code = main(['estimate', config_path('example1-edmd'), '--out-dir', str(tmp_path),
                 '--pairs', str(example1_run / 'pairs.csv')])
    assert code == 0
    assert not (tmp_path / 'pairs.csv').exists()
    assert not (tmp_path / 'spectrum.csv').exists()
    assert_allclose(read_matrix(tmp_path / 'koopman.csv'), read_matrix(example1_run / 'koopman.csv'),
                    rtol=0, atol=0)


def test_dmd_matches_edmd_with_identity(tmp_path):
    dmd_dir = run_config('example1-dmd', tmp_path / 'dmd')
    raw = linear(dictionary={'family': 'identity'}, estimator={'method': 'edmd'})
    run(RunConfig.from_dict(raw), str(tmp_path / 'identity'))
    diff = compare(str(dmd_dir), str(tmp_path / 'identity'), tolerance=1e-12)
    assert diff['within_tolerance']
    assert_allclose(read_matrix(dmd_dir / 'koopman.csv'), [[0.48, -0.06], [-0.16, 0.52]], atol=1e-12)


def test_kernel_matches_explicit_features(tmp_path):
    run_config('example1-kernel', tmp_path / 'kernel')
    run_config('example1-poly-features', tmp_path / 'features')
    code = main(['compare', str(tmp_path / 'kernel'), str(tmp_path / 'features'), '--spectra-only',
                 '--out-dir', str(tmp_path)])
    assert code == 0
    diff = json.loads((tmp_path / 'compare.json').read_text())
    assert diff['nonzero_eigenvalues'] == [6, 6]
    assert diff['spectrum_max_abs'] < 1e-8


def test_binary_matrices(tmp_path):
    run_config('example1-dmd', tmp_path, '--matrix-format', 'binary')
    assert (tmp_path / 'koopman.bin').read_bytes().startswith(b'TOPK1')
    assert_allclose(read_matrix(tmp_path / 'matrix.bin'), [[0.48, -0.06], [-0.16, 0.52]], atol=1e-12)


def test_psi_dump(tmp_path):
    run_config('example1-dmd', tmp_path, '--dump-psi')
    psi_x = pd.read_csv(tmp_path / 'psi_x.csv')
    assert list(psi_x.columns) == ['x1', 'x2']
    assert len(psi_x) == 1000


def test_simulate_stage_writes_pairs_only(tmp_path):
    assert main(['simulate', config_path('example1-dmd'), '--out-dir', str(tmp_path)]) == 0
    assert sorted(os.listdir(tmp_path)) == ['pairs.csv', 'report.json']


# =====================================================================
# Exit codes
# =====================================================================

def test_invalid_config_exits_with_one(tmp_path, capsys):
    raw = linear(estimator={'method': 'dmd'})
    raw['design']['per_bx'] = 3
    assert main(['run', write_config(tmp_path, raw), '--out-dir', str(tmp_path / 'out')]) == 1
    assert 'design.per_bx' in capsys.readouterr().err


def test_strict_mode_turns_warnings_into_exit_two(tmp_path):
    raw = linear(dictionary={'family': 'monomials', 'degree': 3}, estimator={'method': 'edmd'})
    raw['design']['total'] = 5
    path = write_config(tmp_path, raw)
    assert main(['run', path, '--out-dir', str(tmp_path / 'lenient')]) == 0
    assert main(['run', path, '--out-dir', str(tmp_path / 'strict'), '--strict']) == 2
    report = json.loads((tmp_path / 'strict' / 'report.json').read_text())
    assert any('rank deficient' in message for message in report['warnings'])


def test_compare_exit_codes(tmp_path):
    run_config('example1-dmd', tmp_path / 'a')
    run_config('example1-dmd', tmp_path / 'b', '--seed', '5')
    assert main(['compare', str(tmp_path / 'a'), str(tmp_path / 'b')]) == 0
    run_config('example1-poly-features', tmp_path / 'c')
    assert main(['compare', str(tmp_path / 'a'), str(tmp_path / 'c')]) == 1
    assert main(['compare', str(tmp_path / 'a'), str(tmp_path / 'c'), '--spectra-only']) == 1


# =====================================================================
# Double well
# =====================================================================

@pytest.fixture(scope='module')
def doublewell_ulam(tmp_path_factory):
    return run_config('doublewell-ulam-desk', tmp_path_factory.mktemp('ulam'))


def test_doublewell_ulam_spectrum(doublewell_ulam):
    P = read_matrix(doublewell_ulam / 'matrix.csv')
    assert_allclose(P.sum(axis=1), 1.0, atol=1e-12)
    spec = eig(P)
    assert abs(spec.eigenvalues[0] - 1.0) < 1e-3
    assert abs(spec.eigenvalues[1].imag) < 1e-12 and 0 < spec.eigenvalues[1].real < 1

    x = BoxPartition((-2.0, -2.0), (2.0, 2.0), (20, 20)).centers()[0]
    density = spec.left[1].real
    assert np.mean(density[x < -0.5]) * np.mean(density[x > 0.5]) < 0

    phi = spec.right[:, 1].real.reshape(20, 20)
    assert np.mean(phi.var(axis=1)) < 0.1 * phi.var()


def test_doublewell_ulam_outputs(doublewell_ulam):
    density = pd.read_csv(doublewell_ulam / 'density.csv')
    assert density['density'].sum() == pytest.approx(1.0)
    assert (density['density'] >= 0).all()
    triplets = pd.read_csv(doublewell_ulam / 'triplets.csv')
    assert triplets['count'].sum() == 8000
    report = json.loads((doublewell_ulam / 'report.json').read_text())
    assert report['empty_boxes'] == []


def test_ulam_and_indicator_edmd_agree(doublewell_ulam, tmp_path):
    run_config('doublewell-indicators-desk', tmp_path)
    diff = compare(str(doublewell_ulam), str(tmp_path), tolerance=0.0)
    assert diff['matrix_max_abs'] == 0.0


def test_langevin_positions(tmp_path):
    run_config('langevin-spatial-desk', tmp_path)
    report = json.loads((tmp_path / 'report.json').read_text())
    assert report['d'] == 1 and report['k'] == 9
    assert len(pd.read_csv(tmp_path / 'eigfun_1.csv')) == 81


@pytest.mark.slow
def test_doublewell_ulam_full(tmp_path):
    run_config('doublewell-ulam-full', tmp_path, '--threads', '4')
    spec = eig(read_matrix(tmp_path / 'matrix.csv'))
    assert abs(spec.eigenvalues[0] - 1.0) < 1e-3
    assert 0 < spec.eigenvalues[1].real < 1


# =====================================================================
# Circle and dihedrals
# =====================================================================

def well_index(phi):
    return np.round((phi - np.pi / 3) / (2 * np.pi / 3)).astype(int) % 3


def test_circle_eigenfunctions_separate_the_wells(tmp_path):
    run_config('circle-fourier-desk', tmp_path)
    values = spectrum(tmp_path)
    assert abs(values[0] - 1.0) < 1e-2
    assert np.all(values[1:3].imag == 0) and np.all((values[1:3].real > 0) & (values[1:3].real < 1))

    means = []
    for i in (2, 3):
        table = pd.read_csv(tmp_path / f'eigfun_{i}.csv')
        phi, f = table['x1'].values, table['re_phi'].values
        inside = np.cos(3 * phi) < 0
        wells = well_index(phi[inside])
        m = np.array([f[inside][wells == w].mean() for w in range(3)])
        for w in range(3):
            if abs(m[w]) >= 0.3 * np.abs(m).max():
                assert np.mean(np.sign(f[inside][wells == w]) == np.sign(m[w])) >= 0.8
        means.append(m)

    points = np.array(means).T
    distances = [np.linalg.norm(points[a] - points[b]) for a, b in ((0, 1), (0, 2), (1, 2))]
    assert min(distances) >= 0.3 * max(distances)


def rotating_dihedral(tmp_path, angles):
    lines = []
    for t, phi in enumerate(angles):
        lines += ['4', f'frame {t}', 'C 1.0 0.0 0.0', 'C 0.0 0.0 0.0', 'C 0.0 0.0 1.0',
                  f'C {np.cos(phi):.17g} {np.sin(phi):.17g} 1.0']
    path = tmp_path / 'rotor.xyz'
    path.write_text('\n'.join(lines) + '\n')
    return path


def test_dihedral_command(tmp_path):
    angles = np.mod(np.cumsum(np.random.default_rng(2).normal(0, 0.5, 200)), 2 * np.pi)
    path = rotating_dihedral(tmp_path, angles)
    out = tmp_path / 'out'
    assert main(['dihedral', '--traj', str(path), '--atoms', '0,1,2,3', '--out-dir', str(out),
                 '--reversible']) == 0
    series = read_series(out / 'series.csv')
    assert_allclose(np.exp(1j * series.values), np.exp(1j * angles), atol=1e-12)
    assert (out / 'pairs.csv').read_text().startswith('# d=1 m=398')


def test_trajectory_config(tmp_path):
    angles = np.mod(np.cumsum(np.random.default_rng(4).normal(0, 0.3, 500)), 2 * np.pi)
    path = rotating_dihedral(tmp_path, angles)
    raw = {'seed': 0, 'trajectory': {'path': str(path), 'atoms': '0,1,2,3', 'reversible': True},
           'dictionary': {'family': 'fourier', 'frequency': 3},
           'estimator': {'method': 'edmd-ag'}, 'spectral': {'generalized': True}}
    report = run(RunConfig.from_dict(raw), str(tmp_path / 'out'))
    assert report['m'] == 998 and report['k'] == 7
    assert abs(report['eigenvalues'][0][0] - 1.0) < 1e-2


def test_dihedral_errors_exit_with_one(tmp_path):
    path = tmp_path / 'bad.xyz'
    path.write_text('4\nonly frame\nC 0 0 0\n')
    assert main(['dihedral', '--traj', str(path), '--atoms', '0,1,2,3', '--out-dir', str(tmp_path)]) == 1
