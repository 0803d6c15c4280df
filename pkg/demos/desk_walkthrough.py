"""Train both stages on a small tc1-analog instance and compare the solvers.

Runs in well under a minute on one core:

    python3 demos/desk_walkthrough.py
"""
import time

import numpy as np

from tslod import (LodDiscretization, MeshHierarchy, make_problem, pglod_solve, random_parameters, rblod_solve,
                   train_stage1, train_two_scale_rom, training_set, ts_rom_solve)
from tslod.stage2 import reduced_parts


def main(n_H=8, n_h=64, eps1=1e-3, eps2=1e-2):
    mesh = MeshHierarchy(n_H, n_h)
    coefficient = make_problem('tc1_analog', mesh)
    disc = LodDiscretization(mesh, coefficient)
    train = training_set(coefficient, 50)
    rho = disc.rho(train)
    print(f'{n_H}x{n_H} coarse / {n_h}x{n_h} fine elements, k = {disc.k}, rho = {rho:.1f}')

    t0 = time.perf_counter()
    model = train_stage1(disc, train, eps1)
    sizes = model.sizes()
    print(f'stage 1: {time.perf_counter() - t0:.1f} s, N_T between {sizes.min()} and {sizes.max()}')

    t0 = time.perf_counter()
    rom = train_two_scale_rom(model, train, eps2, rho)
    print(f'stage 2: {time.perf_counter() - t0:.1f} s, N = {rom.N}, M = {rom.M}')
    for e in rom.trace:
        print(f'  N = {e["N"]:2d}  max estimate {e["max_estimate"]:.3e}')

    S = disc.forms.S
    print(f'{"mu":>6} {"t_LOD":>8} {"t_RBLOD":>9} {"t_TSRBLOD":>10} {"err RBLOD":>10} {"err TSRBLOD":>12} {"eta_a":>9}')
    for mu in random_parameters(coefficient, 5, seed=1):
        t0 = time.perf_counter()
        u = pglod_solve(disc, mu).u_H
        t_lod = time.perf_counter() - t0
        t0 = time.perf_counter()
        u_rb = rblod_solve(model, mu)
        t_rb = time.perf_counter() - t0
        t0 = time.perf_counter()
        c, eta_a, _ = ts_rom_solve(rom, mu)
        t_ts = time.perf_counter() - t0
        u_ts = reduced_parts(rom, c)[0]
        rel = lambda v: np.sqrt((v - u) @ (S @ (v - u)) / (u @ (S @ u)))
        print(f'{mu[0]:6.3f} {t_lod:8.3f} {t_rb:9.4f} {t_ts:10.5f} {rel(u_rb):10.2e} {rel(u_ts):12.2e} {eta_a:9.2e}')


if __name__ == '__main__':
    main()
