# -------------------------

version = '1.0.0'

default_count = 10 # eigenpairs written to eigenvectors.csv and eigfun_<i>.csv
default_out_root = 'runs'
compare_tolerance = 1e-8
nonzero_eigenvalue = 1e-8 # relative to the spectral radius, for compare
diagnostics_max_k = 1000 # Schur diagnostics are skipped above this size

exit_ok = 0
exit_error = 1
exit_strict = 2

# -------------------------

import sys
import os
import argparse
import hashlib
import json
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import yaml
from scipy.linalg import LinAlgWarning

from dictionaries import Dictionary, BoxPartition, DictionaryError, build_dictionary, psi_table, state_selector
from dynamics import IntegratorConfig, SampleDesign, IntegrationDivergedError, build_system, generate_pairs
from estimators import (EdmdResult, EstimationError, NumericalWarning, TransferMatrix, adjoint_pf, atomic_write,
                        dmd, edmd, kernel_edmd, load_pairs, pf_edmd, pinv_cutoff, read_matrix, save_pairs,
                        ulam_estimate, write_matrix, write_triplets)
from spectral import (SpectralError, dual_basis, eig, eigenfunctions, eigenvector_table, eval_on_grid,
                      generalized_eig, invariant_density, koopman_modes, modes_table, schur_diagnostics,
                      spectrum_table, write_table)
from mdio import (DihedralError, DihedralSpec, TrajectoryParseError, dihedral_series, pairs_from_series,
                  read_xyz, write_series)


class ConfigError(ValueError):
    pass


METHODS = ('ulam', 'edmd', 'edmd-ag', 'pf-edmd', 'adjoint-pf', 'dmd', 'kernel-edmd')
FORMULATIONS = {'edmd': 'pseudoinverse', 'edmd-ag': 'normal-equations', 'pf-edmd': 'normal-equations',
                'adjoint-pf': 'normal-equations', 'dmd': 'pseudoinverse'}
STAGES = ('simulate', 'estimate', 'spectrum', 'grid', 'modes', 'run')

_domain = {'lower': list, 'upper': list, 'counts': list}
SCHEMA = {
    'name': str,
    'seed': int,
    'slow': bool,
    'system': {'name': str, 'params': dict},
    'design': {'mode': str, 'lower': list, 'upper': list, 'counts': list, 'per_box': int, 'total': int,
               'length': int, 'lag': int, 'orbits': int, 'x0': list, 'block_size': int, 'reversible': bool},
    'integrator': {'h': float, 'n_steps': int, 'lag': float},
    'trajectory': {'path': str, 'atoms': str, 'stride': int, 'lag': int, 'reversible': bool},
    'dictionary': {'family': str, 'degree': int, 'max_per_dim': (int, list), 'frequency': int,
                   'centers': list, 'width': float, 'per_dim': int, 'domain': _domain},
    'estimator': {'method': str, 'formulation': str, 'cutoff': float, 'degree': int, 'positions': int},
    'spectral': {'count': int, 'side': str, 'generalized': bool, 'modes': bool, 'dual': bool,
                 'density': bool, 'grid': _domain},
    'output': {'dir': str, 'pairs': bool, 'matrix_format': str, 'dump_psi': bool},
}


@dataclass(frozen=True)
class RunConfig:
    name: str
    seed: int
    raw: dict = field(repr=False)

    def section(self, key):
        return dict(self.raw.get(key) or {})

    @property
    def method(self):
        return self.raw['estimator']['method']

    @property
    def digest(self):
        return hashlib.sha256(json.dumps(self.raw, sort_keys=True).encode('utf-8')).hexdigest()

    @classmethod
    def load(cls, path, overrides=None):
        try:
            with open(path, encoding='utf-8') as handle:
                raw = yaml.safe_load(handle)
        except yaml.YAMLError as error:
            raise ConfigError(f"{path}: not valid YAML ({error})") from error
        except OSError as error:
            raise ConfigError(f"{path}: {error.strerror}") from error
        return cls.from_dict(raw, overrides, default_name=os.path.splitext(os.path.basename(path))[0])

    @classmethod
    def from_dict(cls, raw, overrides=None, default_name='run'):
        raw = validate(raw if raw is not None else {}, SCHEMA)
        for key, value in (overrides or {}).items():
            section, _, name = key.rpartition('.')
            target = raw.setdefault(section, {}) if section else raw
            target[name] = value
        raw.setdefault('name', default_name)
        raw.setdefault('seed', 0)
        check(raw)
        return cls(raw['name'], int(raw['seed']), raw)


def _join(path, key):
    return f'{path}.{key}' if path else str(key)


def validate(value, schema, path=''):
    """Check value against the nested schema, rejecting unknown keys with their dotted path."""
    if isinstance(schema, dict):
        if not isinstance(value, dict):
            raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(value).__name__}")
        for key in value:
            if key not in schema:
                raise ConfigError(f"{_join(path, key)}: unknown key")
        return {key: validate(item, schema[key], _join(path, key)) for key, item in value.items()}

    types = schema if isinstance(schema, tuple) else (schema,)
    if isinstance(value, bool) and bool not in types:
        raise ConfigError(f"{path}: expected {'/'.join(t.__name__ for t in types)}, got bool")
    if float in types:
        if isinstance(value, int) and not isinstance(value, bool):
            return float(value)
        if isinstance(value, str):
            # YAML 1.1 reads 1e-3 as a string
            try:
                return float(value)
            except ValueError:
                pass
    if not isinstance(value, types):
        raise ConfigError(f"{path}: expected {'/'.join(t.__name__ for t in types)}, got {type(value).__name__}")
    return value


def check(raw):
    """Cross-field rules the schema cannot express."""
    estimator = raw.get('estimator') or {}
    method = estimator.get('method')
    if method is None:
        raise ConfigError("estimator.method: required")
    if method not in METHODS:
        raise ConfigError(f"estimator.method: '{method}' is not one of {', '.join(METHODS)}")
    if 'formulation' in estimator and estimator['formulation'] not in ('pseudoinverse', 'normal-equations'):
        raise ConfigError(f"estimator.formulation: '{estimator['formulation']}' is not pseudoinverse/normal-equations")

    if 'trajectory' in raw:
        for key in ('path', 'atoms'):
            if key not in raw['trajectory']:
                raise ConfigError(f"trajectory.{key}: required")
    else:
        for section, key in (('system', 'name'), ('design', 'mode'), ('integrator', 'h')):
            if key not in (raw.get(section) or {}):
                raise ConfigError(f"{section}.{key}: required")
        integrator = raw['integrator']
        if ('lag' in integrator) == ('n_steps' in integrator):
            raise ConfigError("integrator: give exactly one of lag and n_steps")

    family = (raw.get('dictionary') or {}).get('family')
    if method not in ('dmd', 'kernel-edmd') and family is None:
        raise ConfigError("dictionary.family: required")
    if method == 'ulam' and family != 'indicators':
        raise ConfigError("dictionary.family: ulam needs the indicators family")
    if family == 'indicators' and 'domain' not in raw['dictionary']:
        raise ConfigError("dictionary.domain: required for indicators")

    spectral = raw.get('spectral') or {}
    if spectral.get('side', 'left') not in ('left', 'right'):
        raise ConfigError(f"spectral.side: '{spectral['side']}' is not left/right")
    if spectral.get('generalized') and method in ('ulam', 'kernel-edmd'):
        raise ConfigError(f"spectral.generalized: not available for {method}")
    if spectral.get('modes') and method not in ('edmd', 'edmd-ag', 'dmd'):
        raise ConfigError(f"spectral.modes: needs a Koopman estimator (edmd, edmd-ag, dmd), not {method}")
    if spectral.get('dual') and method not in ('edmd', 'edmd-ag', 'dmd'):
        raise ConfigError(f"spectral.dual: needs a Koopman estimator (edmd, edmd-ag, dmd), not {method}")

    output = raw.get('output') or {}
    if output.get('matrix_format', 'csv') not in ('csv', 'binary'):
        raise ConfigError(f"output.matrix_format: '{output['matrix_format']}' is not csv/binary")


# Pipeline

@dataclass(frozen=True)
class Estimate:
    """The estimator output in one place.

    `matrix` is what gets decomposed, `koopman` the Koopman matrix used by compare
    and `side` which eigenvectors hold the eigenfunction coefficients.
    """
    method: str
    matrix: np.ndarray
    koopman: np.ndarray
    side: str
    kind: str
    dictionary: Dictionary
    result: object


def simulate(config, threads=1):
    if 'trajectory' in config.raw:
        section = config.section('trajectory')
        print("[Read Trajectory] ...", end='\r')
        traj = read_xyz(section['path'], section.get('stride', 1))
        series = dihedral_series(traj, DihedralSpec.parse(section['atoms']), section.get('lag', 1))
        print(f"[Read Trajectory] {traj.n_frames} frames                 ")
        pairs = pairs_from_series(series, reversible=section.get('reversible', False))
    else:
        system_section = config.section('system')
        try:
            system = build_system(system_section['name'], **(system_section.get('params') or {}))
        except TypeError as error:
            raise ConfigError(f"system.params: {error}") from error
        integrator = config.section('integrator')
        if 'lag' in integrator:
            cfg = IntegratorConfig.from_lag(integrator['lag'], integrator['h'], config.seed)
        else:
            cfg = IntegratorConfig(integrator['h'], integrator['n_steps'], config.seed)
        design_section = config.section('design')
        reversible = design_section.pop('reversible', False)
        design = SampleDesign(**design_section)

        print("[Simulate] ...", end='\r')
        pairs = generate_pairs(system, design, cfg, threads)
        if reversible:
            pairs = pairs.concat(pairs, pairs.reversed())
        print(f"[Simulate] {system.name}: d = {pairs.d}, m = {pairs.m}                 ")

    positions = config.section('estimator').get('positions')
    if positions:
        pairs = pairs.positions(positions)
    return pairs


def estimate(config, pairs, cutoff=None):
    method = config.method
    section = config.section('estimator')
    cutoff = cutoff if cutoff is not None else section.get('cutoff', pinv_cutoff)
    formulation = section.get('formulation', FORMULATIONS.get(method))

    print(f"[Estimate] {method} ...", end='\r')
    if method == 'kernel-edmd':
        result = kernel_edmd(pairs, section.get('degree', 2))
        out = Estimate(method, result.M_hat, result.M_hat, 'left', 'koopman', result.dictionary, result)
    elif method == 'dmd':
        result = dmd(pairs, cutoff)
        out = Estimate(method, result.M_K, result.M_K, 'left', 'koopman', result.dictionary, result)
    else:
        dictionary = build_dictionary(config.section('dictionary'), dim=pairs.d)
        if method == 'ulam':
            result = ulam_estimate(pairs, dictionary.params['boxes'])
            out = Estimate(method, result.P, result.P.T, 'left', 'perron-frobenius', dictionary, result)
        elif method in ('edmd', 'edmd-ag'):
            result = edmd(pairs, dictionary, formulation, cutoff)
            out = Estimate(method, result.M_K, result.M_K, 'left', 'koopman', dictionary, result)
        elif method == 'pf-edmd':
            result = pf_edmd(pairs, dictionary, formulation, cutoff)
            out = Estimate(method, result.M_P, result.M_K, 'left', 'perron-frobenius', dictionary, result)
        else:
            result = edmd(pairs, dictionary, formulation, cutoff)
            out = Estimate(method, adjoint_pf(result), result.M_K, 'right', 'perron-frobenius', dictionary, result)
    print(f"[Estimate] {method}: k = {out.matrix.shape[0]}                 ")
    return out


def decompose(config, est):
    spectral = config.section('spectral')
    print("[Spectrum] ...", end='\r')
    if spectral.get('generalized') and isinstance(est.result, EdmdResult):
        A = est.result.A.T if est.method == 'pf-edmd' else est.result.A
        spec = generalized_eig(A, est.result.G, est.method, est.kind)
    else:
        spec = eig(est.matrix, est.method, est.kind)
    print(f"[Spectrum] lambda_1 = {spec.eigenvalues[0]:.6f}                 ")
    return spec


def write_estimate(out_dir, est, pairs, fmt='csv', dump_psi=False):
    ext = 'bin' if fmt == 'binary' else 'csv'
    write_matrix(est.matrix, os.path.join(out_dir, f'matrix.{ext}'), fmt)
    write_matrix(est.koopman, os.path.join(out_dir, f'koopman.{ext}'), fmt)
    if isinstance(est.result, EdmdResult):
        write_matrix(est.result.A, os.path.join(out_dir, f'A.{ext}'), fmt)
        write_matrix(est.result.G, os.path.join(out_dir, f'G.{ext}'), fmt)
    if isinstance(est.result, TransferMatrix):
        write_triplets(est.result, os.path.join(out_dir, 'triplets.csv'))
    if dump_psi and est.method != 'kernel-edmd':
        for name, points in (('psi_x', pairs.X), ('psi_y', pairs.Y)):
            write_table(psi_table(est.dictionary, points), os.path.join(out_dir, f'{name}.csv'))


def run(config, out_dir, stage='run', threads=1, cutoff=None, pairs_file=None, dump_psi=None, matrix_format=None):
    """Execute the pipeline up to `stage` and return the run report."""
    start = time.perf_counter()
    output = config.section('output')
    spectral = config.section('spectral')
    fmt = matrix_format or output.get('matrix_format', 'csv')
    dump_psi = output.get('dump_psi', False) if dump_psi is None else dump_psi
    os.makedirs(out_dir, exist_ok=True)
    report = {'name': config.name, 'seed': config.seed, 'config_hash': config.digest, 'version': version,
              'method': config.method, 'stage': stage}

    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter('always', NumericalWarning)
        warnings.simplefilter('always', LinAlgWarning)

        # Pairs
        pairs = load_pairs(pairs_file) if pairs_file else simulate(config, threads)
        report.update({'d': pairs.d, 'm': pairs.m})
        if output.get('pairs', True) and not pairs_file:
            save_pairs(pairs, os.path.join(out_dir, 'pairs.csv'))

        if stage != 'simulate':
            est = estimate(config, pairs, cutoff)
            write_estimate(out_dir, est, pairs, fmt, dump_psi)
            report['k'] = int(est.matrix.shape[0])
            if isinstance(est.result, EdmdResult):
                report.update({'residual': est.result.residual, 'rank': est.result.rank,
                               'gram_cond': est.result.cond, 'formulation': est.result.formulation})
            if isinstance(est.result, TransferMatrix):
                report['empty_boxes'] = list(est.result.empty_rows)

        if stage not in ('simulate', 'estimate'):
            spec = decompose(config, est)
            count = spectral.get('count', default_count)
            write_table(spectrum_table(spec), os.path.join(out_dir, 'spectrum.csv'))
            funcs = eigenfunctions(spec.take(count), est.dictionary, est.side)
            write_table(eigenvector_table(funcs), os.path.join(out_dir, 'eigenvectors.csv'))
            report['eigenvalues'] = [[float(w.real), float(w.imag)] for w in spec.eigenvalues[:count]]
            report['eigenvector_cond'] = float(np.linalg.cond(spec.left))
            if spec.k <= diagnostics_max_k:
                report['schur'] = schur_diagnostics(est.matrix)

            if spectral.get('density') or (est.method == 'ulam' and stage == 'run'):
                density = invariant_density(spec)
                write_table(pd.DataFrame({'box': np.arange(density.size), 'density': density}),
                            os.path.join(out_dir, 'density.csv'))

            if 'grid' in spectral and stage in ('grid', 'run'):
                print("[Grid] ...", end='\r')
                grid = spectral['grid']
                tables = eval_on_grid(funcs, grid['lower'], grid['upper'], grid['counts'])
                for i, df in tables.items():
                    write_table(df, os.path.join(out_dir, f'eigfun_{i + 1}.csv'))
                print(f"[Grid] {len(tables)} eigenfunctions                 ")

            if spectral.get('modes') and stage in ('modes', 'run'):
                print("[Modes] ...", end='\r')
                modes = koopman_modes(spec, state_selector(est.dictionary))
                write_table(modes_table(modes), os.path.join(out_dir, 'modes.csv'))
                print(f"[Modes] {modes.V.shape[1]} modes                 ")

            if spectral.get('dual') and stage == 'run':
                dual = dual_basis(spec, est.result.G, est.result.m, est.dictionary)
                write_table(eigenvector_table(dual), os.path.join(out_dir, 'dual.csv'))

    report['warnings'] = [str(w.message) for w in caught if issubclass(w.category, (NumericalWarning, LinAlgWarning))]
    for message in report['warnings']:
        print(f"[Warning] {message}")
    report['wall_time'] = time.perf_counter() - start
    with atomic_write(os.path.join(out_dir, 'report.json')) as handle:
        json.dump(_plain(report), handle, indent=2)
    return report


def _plain(value):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to None."""
    if isinstance(value, dict):
        return {key: _plain(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(item) for item in value]
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not np.isfinite(value):
        return None
    return value


def _load_run(path):
    directory = os.path.dirname(path) if path.endswith('.json') else path
    matrix = None
    for name in ('koopman.csv', 'koopman.bin'):
        if os.path.exists(os.path.join(directory, name)):
            matrix = read_matrix(os.path.join(directory, name))
            break
    spectrum_file = os.path.join(directory, 'spectrum.csv')
    if matrix is None and not os.path.exists(spectrum_file):
        raise EstimationError(f"{directory}: no koopman matrix or spectrum found")
    if os.path.exists(spectrum_file):
        df = pd.read_csv(spectrum_file, float_precision='round_trip')
        spectrum = df['re_lambda'].values + 1j * df['im_lambda'].values
    else:
        spectrum = eig(matrix).eigenvalues
    return matrix, spectrum


def _nonzero(spectrum):
    scale = max(np.abs(spectrum).max(), np.finfo(float).tiny)
    return spectrum[np.abs(spectrum) > nonzero_eigenvalue * scale]


def compare(run_a, run_b, tolerance=compare_tolerance, spectra_only=False):
    """Differences between the Koopman matrices and nonzero spectra of two runs."""
    matrix_a, spectrum_a = _load_run(run_a)
    matrix_b, spectrum_b = _load_run(run_b)
    diff = {'tolerance': tolerance}
    if not spectra_only:
        if matrix_a is None or matrix_b is None or matrix_a.shape != matrix_b.shape:
            shapes = [None if m is None else list(m.shape) for m in (matrix_a, matrix_b)]
            raise EstimationError(f"matrix shapes differ: {shapes[0]} and {shapes[1]}")
        delta = matrix_a - matrix_b
        diff['matrix_max_abs'] = float(np.abs(delta).max())
        diff['matrix_frobenius'] = float(np.linalg.norm(delta))
    nonzero_a, nonzero_b = _nonzero(spectrum_a), _nonzero(spectrum_b)
    if nonzero_a.size != nonzero_b.size:
        diff['spectrum_max_abs'] = float('inf')
    else:
        delta = nonzero_a - nonzero_b
        diff['spectrum_max_abs'] = float(np.abs(delta).max()) if delta.size else 0.0
        diff['spectrum_frobenius'] = float(np.linalg.norm(delta))
    diff['nonzero_eigenvalues'] = [int(nonzero_a.size), int(nonzero_b.size)]
    diff['within_tolerance'] = bool(all(diff[key] <= tolerance for key in ('matrix_max_abs', 'spectrum_max_abs')
                                        if key in diff))
    return diff


def dihedral(traj_file, atoms, stride, lag, out_dir, reversible=False):
    print("[Read Trajectory] ...", end='\r')
    traj = read_xyz(traj_file, stride)
    print(f"[Read Trajectory] {traj.n_frames} frames, {traj.n_atoms} atoms                 ")
    series = dihedral_series(traj, DihedralSpec.parse(atoms), lag)
    write_series(series, os.path.join(out_dir, 'series.csv'))
    pairs = pairs_from_series(series, reversible=reversible)
    save_pairs(pairs, os.path.join(out_dir, 'pairs.csv'))
    print(f"[Dihedral] {series.n_frames} angles, {pairs.m} pairs                 ")
    return series


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--seed', type=int, help='master seed, overrides the config')
    common.add_argument('--threads', type=int, default=1, help='worker threads for sample generation')
    common.add_argument('--strict', action='store_true', help='exit with code 2 on numerical warnings')
    common.add_argument('--out-dir', help='output directory')
    common.add_argument('--cutoff', type=float, help='relative pseudoinverse cutoff')
    common.add_argument('--dump-psi', action='store_true', default=None, help='write Psi_X and Psi_Y')
    common.add_argument('--matrix-format', choices=('csv', 'binary'), help='estimator matrix file format')

    parser = argparse.ArgumentParser(prog='transferop', description='Transfer operator estimation from trajectory data')
    commands = parser.add_subparsers(dest='command', required=True)
    for stage in STAGES:
        command = commands.add_parser(stage, parents=[common], help=f'pipeline up to {stage}')
        command.add_argument('config', help='YAML run config')
        command.add_argument('--pairs', help='reuse a pairs CSV instead of simulating')

    command = commands.add_parser('dihedral', parents=[common], help='dihedral series and pairs from an XYZ trajectory')
    command.add_argument('--traj', required=True)
    command.add_argument('--atoms', required=True, help='zero-based indices i,j,k,l')
    command.add_argument('--stride', type=int, default=1)
    command.add_argument('--lag', type=int, default=1)
    command.add_argument('--reversible', action='store_true')

    command = commands.add_parser('compare', parents=[common], help='diff two runs')
    command.add_argument('run_a')
    command.add_argument('run_b')
    command.add_argument('--tolerance', type=float, default=compare_tolerance)
    command.add_argument('--spectra-only', action='store_true')
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == 'compare':
            diff = compare(args.run_a, args.run_b, args.tolerance, args.spectra_only)
            print(json.dumps(_plain(diff), indent=2))
            if args.out_dir:
                with atomic_write(os.path.join(args.out_dir, 'compare.json')) as handle:
                    json.dump(_plain(diff), handle, indent=2)
            return exit_ok if diff['within_tolerance'] else exit_error

        if args.command == 'dihedral':
            dihedral(args.traj, args.atoms, args.stride, args.lag, args.out_dir or '.', args.reversible)
            return exit_ok

        overrides = {} if args.seed is None else {'seed': args.seed}
        config = RunConfig.load(args.config, overrides)
        out_dir = args.out_dir or config.section('output').get('dir') or os.path.join(default_out_root, config.name)
        report = run(config, out_dir, args.command, args.threads, args.cutoff, args.pairs, args.dump_psi,
                     args.matrix_format)
    except (ConfigError, DictionaryError, EstimationError, SpectralError, TrajectoryParseError, DihedralError,
            IntegrationDivergedError, ValueError, OSError) as error:
        print(f"[Error] {error}", file=sys.stderr)
        return exit_error

    if args.strict and report['warnings']:
        return exit_strict
    return exit_ok


if __name__ == "__main__":
    '''Command: python3 transferop.py <simulate|estimate|spectrum|grid|modes|run> <config.yaml> [--seed N] [--threads N] [--strict] [--out-dir DIR]
               python3 transferop.py dihedral --traj <file.xyz> --atoms i,j,k,l [--stride s] [--lag t]
               python3 transferop.py compare <runA> <runB> [--tolerance tol] [--spectra-only]'''
    sys.exit(main())
