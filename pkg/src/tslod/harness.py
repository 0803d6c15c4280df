"""Offline training, validation and reporting for reproducible experiments."""

import csv
import dataclasses
import json
import logging
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .coeff import make_problem, parameter_bounds, random_parameters, training_set
from .fem import fem_reference_solve
from .grid import MeshHierarchy
from .lod import LodDiscretization, TwoScaleVector, pglod_solve, two_scale_norms
from .stage1 import Stage1Model, load_rom, rblod_solve, save_rom, train_stage1
from .stage2 import (GreedyAbort, estimator_factors, load_two_scale_rom, reconstruct_solution, reduced_parts,
                     residual_norm, save_two_scale_rom, train_two_scale_rom, ts_rom_solve)

log = logging.getLogger(__name__)

METHODS = ('FEM', 'LOD', 'RBLOD', 'TSRBLOD')


@dataclass
class ExperimentConfig:
    problem: str = 'tc1_analog'
    seed: int = 0
    n_H: int = 16
    n_h: int = 256
    k: Optional[int] = None
    eps1: float = 1e-3
    eps2: float = 1e-2
    train_counts: list = field(default_factory=lambda: [50])
    validation_count: int = 10
    validation_seed: int = 1
    methods: list = field(default_factory=lambda: list(METHODS))
    workers: int = 1
    retain_fine_data: bool = False
    output_dir: str = 'artifacts'
    online_repeats: int = 5
    rho: Optional[float] = None

    def __post_init__(self):
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValueError(f'unknown methods {sorted(unknown)}; choose from {METHODS}')
        if self.eps1 >= self.eps2:
            warnings.warn(f'eps1={self.eps1} is not below eps2={self.eps2}; the Stage-2 greedy may abort')
        if self.online_repeats < 1:
            raise ValueError('online_repeats must be positive')

    @classmethod
    def from_json(cls, path, **overrides):
        data = json.loads(Path(path).read_text())
        names = {f.name for f in dataclasses.fields(cls)}
        bad = set(data) - names
        if bad:
            raise ValueError(f'unknown config keys {sorted(bad)}')
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**data)

    def to_dict(self):
        return dataclasses.asdict(self)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


@dataclass(eq=False)
class Artifacts:
    config: ExperimentConfig
    disc: LodDiscretization
    model: Stage1Model
    rom: object
    train: np.ndarray
    rho: float
    timings: dict
    abort: Optional[dict] = None


def setup(config):
    mesh = MeshHierarchy(config.n_H, config.n_h)
    coefficient = make_problem(config.problem, mesh, config.seed)
    disc = LodDiscretization(mesh, coefficient, k=config.k)
    train = training_set(coefficient, config.train_counts)
    return disc, train


def validation_set(config, coefficient):
    return random_parameters(coefficient, config.validation_count, config.validation_seed)


def run_offline(config, write=True, callback=None):
    """Train Stage 1 for all elements, then the Stage-2 model, and store them."""
    disc, train = setup(config)
    rho = disc.rho(train) if config.rho is None else float(config.rho)
    timings = {}
    t0 = time.perf_counter()
    model = train_stage1(disc, train, config.eps1, workers=config.workers, retain=config.retain_fine_data)
    timings['t_offline_1'] = time.perf_counter() - t0
    timings['t_offline_1_av'] = timings['t_offline_1'] / disc.mesh.n_coarse_elements
    abort = None
    rom = None
    if 'TSRBLOD' in config.methods:
        t0 = time.perf_counter()
        try:
            rom = train_two_scale_rom(model, train, config.eps2, rho, callback=callback)
        except GreedyAbort as e:
            abort = dict(mu=e.mu.tolist(), floor=e.floor, trace=e.trace, message=str(e))
            log.error('%s', e)
        timings['t_offline_2'] = time.perf_counter() - t0
        timings['t_offline'] = timings['t_offline_1'] + timings['t_offline_2']
    else:
        timings['t_offline'] = timings['t_offline_1']
    art = Artifacts(config, disc, model, rom, train, rho, timings, abort)
    if write:
        write_artifacts(art)
    if abort is not None:
        raise GreedyAbort(abort['mu'], abort['floor'], abort['trace'])
    return art


def write_artifacts(art):
    out = Path(art.config.output_dir)
    (out / 'stage1').mkdir(parents=True, exist_ok=True)
    for rom in art.model.roms:
        save_rom(rom, out / 'stage1' / f'element_{rom.T:05d}.npz')
    if art.rom is not None:
        save_two_scale_rom(art.rom, out / 'stage2.npz')
    manifest = dict(config=art.config.to_dict(), mesh_signature=art.disc.mesh.signature(), k=art.disc.k,
                    rho=art.rho, alpha=art.model.alpha, beta=art.model.beta, eps1=art.model.eps1,
                    train_hash=art.model.train_hash, timings=art.timings, abort=art.abort,
                    stage1_sizes=art.model.sizes().tolist(),
                    stage2_trace=None if art.rom is None else art.rom.trace)
    (out / 'manifest.json').write_text(json.dumps(manifest, indent=2))


def load_artifacts(config, directory):
    directory = Path(directory)
    manifest = json.loads((directory / 'manifest.json').read_text())
    disc, train = setup(config)
    if manifest['mesh_signature'] != disc.mesh.signature():
        raise ValueError(f'artifacts were built for mesh {manifest["mesh_signature"]}, '
                         f'config asks for {disc.mesh.signature()}')
    roms = [load_rom(directory / 'stage1' / f'element_{T:05d}.npz') for T in disc.elements]
    model = Stage1Model(roms, disc.coefficient.theta, disc.forms.F_H.copy(), disc.forms.S.copy(),
                        manifest['alpha'], manifest['beta'], manifest['k'], manifest['eps1'],
                        manifest['train_hash'], manifest['mesh_signature'])
    rom = None
    if (directory / 'stage2.npz').exists():
        rom = load_two_scale_rom(directory / 'stage2.npz', disc.coefficient.theta)
    return Artifacts(config, disc, model, rom, train, manifest['rho'], manifest['timings'], manifest['abort'])


@dataclass
class Report:
    config: dict
    metrics: dict = field(default_factory=dict)     # method -> metric -> value
    timings: dict = field(default_factory=dict)
    sizes: dict = field(default_factory=dict)
    traces: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


def _median_time(fn, repeats):
    times, out = [], None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times)), out


def _rel(e, ref, M):
    return float(np.sqrt(max(e @ (M @ e), 0.0) / (ref @ (M @ ref))))


def run_validate(config, artifacts=None):
    """Error, time and size measures over the validation set."""
    if artifacts is None or isinstance(artifacts, (str, Path)):
        art = load_artifacts(config, artifacts or config.output_dir) if ('RBLOD' in config.methods or
                                                                       'TSRBLOD' in config.methods) else None
        disc = art.disc if art else setup(config)[0]
    else:
        art, disc = artifacts, artifacts.disc
    forms = disc.forms
    methods = list(config.methods)
    if 'TSRBLOD' in methods and (art is None or art.rom is None):
        raise ValueError('no trained two-scale model in the artifacts')
    val = validation_set(config, disc.coefficient)
    need_fem = 'FEM' in methods or 'LOD' in methods
    need_lod = any(m in methods for m in ('LOD', 'RBLOD', 'TSRBLOD'))
    errs = {m: {} for m in methods}
    t_online = {m: [] for m in ('RBLOD', 'TSRBLOD') if m in methods}
    t_lod, t_fem = [], []
    for mu in val:
        u_h = None
        if need_fem:
            t0 = time.perf_counter()
            u_h = fem_reference_solve(forms, mu)
            t_fem.append(time.perf_counter() - t0)
        u_lod = None
        if need_lod:
            t0 = time.perf_counter()
            u_lod = pglod_solve(disc, mu, workers=config.workers).u_H
            t_lod.append(time.perf_counter() - t0)
        approx = {}
        if 'RBLOD' in methods:
            t, approx['RBLOD'] = _median_time(lambda: rblod_solve(art.model, mu), config.online_repeats)
            t_online['RBLOD'].append(t)
        if 'TSRBLOD' in methods:
            t, (c, eta_a, eta_1) = _median_time(lambda: ts_rom_solve(art.rom, mu), config.online_repeats)
            t_online['TSRBLOD'].append(t)
            approx['TSRBLOD'] = reduced_parts(art.rom, c)[0]
            errs['TSRBLOD'].setdefault('eta_a_max', []).append(eta_a)
        for m, u in approx.items():
            e = u - u_lod
            errs[m].setdefault('e_H1_rel_LOD', []).append(_rel(e, u_lod, forms.S))
            errs[m].setdefault('e_L2_rel_LOD', []).append(_rel(e, u_lod, forms.M_H))
            if u_h is not None:
                errs[m].setdefault('e_L2_rel_FEM', []).append(_rel(forms.P @ u - u_h, u_h, forms.M_h))
        if 'LOD' in methods:
            errs['LOD'].setdefault('e_L2_rel_LOD_FEM', []).append(_rel(forms.P @ u_lod - u_h, u_h, forms.M_h))
    report = Report(config.to_dict())
    for m in methods:
        report.metrics[m] = {name: float(np.max(v)) for name, v in errs[m].items()}
    if t_lod:
        report.timings['t_LOD'] = float(np.median(t_lod))
    if t_fem:
        report.timings['t_FEM'] = float(np.median(t_fem))
    for m, ts in t_online.items():
        report.timings[f't_online_{m}'] = float(np.median(ts))
        if t_lod:
            report.timings[f'speedup_{m}'] = report.timings['t_LOD'] / report.timings[f't_online_{m}']
    if art is not None:
        report.timings.update({k: float(v) for k, v in art.timings.items()})
        sizes = art.model.sizes()
        report.sizes.update(stage1_N_T_total=int(sizes.sum()), stage1_N_T_avg=float(sizes.mean()),
                            stage1_bytes=int(art.model.size_bytes()))
        if art.rom is not None:
            report.sizes.update(stage2_N=int(art.rom.N), stage2_M=int(art.rom.M),
                                stage2_bytes=int(art.rom.size_bytes()))
            report.traces['stage2'] = art.rom.trace
        report.traces['stage1_avg'] = _average_stage1_trace(art.model)
    return report


def _average_stage1_trace(model):
    L = max((len(r.trace) for r in model.roms), default=0)
    return [float(np.mean([r.trace[i] for r in model.roms if len(r.trace) > i])) for i in range(L)]


def report_metrics(report, out_dir, formats=('json', 'csv', 'trace')):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    if 'json' in formats:
        (out / 'report.json').write_text(report.to_json())
        files.append(out / 'report.json')
    if 'csv' in formats:
        write_table(report, out / 'tables.csv')
        files.append(out / 'tables.csv')
    if 'trace' in formats and report.traces.get('stage2'):
        write_trace(report.traces['stage2'], out / 'greedy_trace.csv')
        files.append(out / 'greedy_trace.csv')
    return files


TABLE_COLUMNS = ('method', 'n_H', 'metric', 'value')


def write_table(report, path):
    n_H = report.config['n_H']
    with open(path, 'w', newline='') as f:
        w = csv.writer(f)
        w.writerow(TABLE_COLUMNS)
        for m, vals in report.metrics.items():
            for name, v in sorted(vals.items()):
                w.writerow([m, n_H, name, repr(float(v))])
        for name, v in sorted(report.timings.items()):
            method = next((m for m in METHODS if name.endswith('_' + m)), 'all')
            w.writerow([method, n_H, name, repr(float(v))])
        for name, v in sorted(report.sizes.items()):
            w.writerow(['TSRBLOD' if name.startswith('stage2') else 'RBLOD', n_H, name, repr(float(v))])


def write_trace(trace, path):
    keys = ['enrichment'] + sorted({k for e in trace for k in e if k != 'mu'}, key=lambda k: (k != 'N', k))
    with open(path, 'w', newline='') as f:
        w = csv.writer(f)
        w.writerow(keys)
        for i, e in enumerate(trace):
            w.writerow([i] + [e.get(k, '') for k in keys[1:]])


# ---------------------------------------------------------------- diagnostics

class TrueErrorMonitor:
    """Callback for the Stage-2 greedy recording the true two-scale errors.

    For each monitored parameter the PG-LOD solution and its correctors are
    computed once; after every enrichment the maximal errors of the reduced
    solution are recorded: total ``|||.|||_a`` error, its coarse part and its
    corrector part, and the estimate with exact per-parameter constants.
    Needs Stage-1 fine bases (``retain=True``). Parameters whose error is at
    round-off level relative to the solution are left out of the effectivities.
    """

    noise = 1e-10

    def __init__(self, disc, model, params, rho):
        self.disc, self.model, self.rho = disc, model, rho
        self.params = np.atleast_2d(params)
        self.truth = []
        for mu in self.params:
            sol = pglod_solve(disc, mu, retain=True)
            corr = sol.correctors
            fine = [corr[T] @ sol.u_H[disc.patch(T).element_dofs] for T in disc.elements]
            self.truth.append((TwoScaleVector(sol.u_H, fine), corr))
        self.scale = [two_scale_norms(disc, mu, rho, U, corr)[1] for mu, (U, corr) in zip(self.params, self.truth)]

    def errors(self, rom, mu, truth):
        U, corr = truth
        c, eta_a, _ = ts_rom_solve(rom, mu)
        approx = reconstruct_solution(rom, self.model, c)
        e = U - approx
        _, err_a, _ = two_scale_norms(self.disc, mu, self.rho, e, corr)
        coarse = np.sqrt(max(err_a ** 2 - self.rho * self._corrector_part(mu, e, corr), 0.0))
        b = parameter_bounds(self.disc.coefficient, mu)
        fa, _ = estimator_factors(np.sqrt(b.alpha), b.alpha)
        return err_a, coarse, np.sqrt(self._corrector_part(mu, e, corr)), fa * residual_norm(rom, mu, c), eta_a

    def _corrector_part(self, mu, e, corr):
        theta = self.disc.thetas(mu)
        total = 0.0
        for T, eT in zip(self.disc.elements, e.fine):
            s = self.disc.system(T)
            d = corr[T] @ e.u_H[s.patch.element_dofs] - eT
            total += d @ (s.stiffness(theta) @ d)
        return total

    def __call__(self, rom):
        rows = np.array([self.errors(rom, mu, t) for mu, t in zip(self.params, self.truth)])
        resolved = rows[:, 0] > self.noise * np.asarray(self.scale)
        eff = rows[resolved, 3] / rows[resolved, 0]
        return dict(true_error=float(rows[:, 0].max()), true_error_coarse=float(rows[:, 1].max()),
                    true_error_correctors=float(rows[:, 2].max()), estimate_exact_max=float(rows[:, 3].max()),
                    min_effectivity=float(eff.min()) if eff.size else float('nan'),
                    max_effectivity=float(eff.max()) if eff.size else float('nan'),
                    monitored_estimate=float(rows[:, 4].max()))


def read_trace(directory):
    manifest = json.loads((Path(directory) / 'manifest.json').read_text())
    trace = manifest.get('stage2_trace')
    if trace is None and manifest.get('abort'):
        trace = manifest['abort']['trace']
    return trace or []
