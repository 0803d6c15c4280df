"""Stage-2 greedy traces with the default stabilization and with rho = 0.

With rho = 0 the estimator no longer sees the corrector part of the error,
so its final value ends far below the true two-scale error. Writes two CSV
traces next to the working directory:

    python3 demos/stabilization_traces.py
"""
from tslod import LodDiscretization, MeshHierarchy, make_problem, train_stage1, training_set
from tslod.harness import TrueErrorMonitor, write_trace
from tslod.stage2 import train_two_scale_rom


def main(n_H=8, n_h=64):
    mesh = MeshHierarchy(n_H, n_h)
    coefficient = make_problem('tc1_analog', mesh)
    disc = LodDiscretization(mesh, coefficient, k=2, cache_systems=True)
    train = training_set(coefficient, 50)
    rho = disc.rho(train)
    model = train_stage1(disc, train, 1e-3, retain=True)
    # true errors are always measured with the default rho
    monitor = TrueErrorMonitor(disc, model, train[::7], rho)
    for name, r in (('default', rho), ('rho0', 0.0)):
        rom = train_two_scale_rom(model, train, 1e-2, r, callback=monitor)
        write_trace(rom.trace, f'trace_{name}.csv')
        print(f'rho = {r:g}')
        for e in rom.trace:
            print(f'  N = {e["N"]:2d}  estimate {e["max_estimate"]:.2e}  true {e["true_error"]:.2e}  '
                  f'correctors {e["true_error_correctors"]:.2e}')


if __name__ == '__main__':
    main()
