"""Command line entry point: ``tslod offline|validate|report|trace``."""

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .harness import (ExperimentConfig, Report, read_trace, report_metrics, run_offline, run_validate, write_table,
                      write_trace)
from .stage2 import GreedyAbort

_LISTS = {'train_counts': int, 'methods': str}


def _add_overrides(parser):
    for f in dataclasses.fields(ExperimentConfig):
        flag = '--' + f.name.replace('_', '-')
        if f.name in _LISTS:
            parser.add_argument(flag, dest=f.name, nargs='+', type=_LISTS[f.name])
        elif f.type in (bool, 'bool'):
            parser.add_argument(flag, dest=f.name, type=lambda s: s.lower() in ('1', 'true', 'yes'))
        elif f.name in ('k', 'n_H', 'n_h', 'seed', 'validation_count', 'validation_seed', 'workers',
                        'online_repeats'):
            parser.add_argument(flag, dest=f.name, type=int)
        elif f.name in ('eps1', 'eps2', 'rho'):
            parser.add_argument(flag, dest=f.name, type=float)
        else:
            parser.add_argument(flag, dest=f.name)


def _config(args):
    names = [f.name for f in dataclasses.fields(ExperimentConfig)]
    overrides = {n: getattr(args, n) for n in names}
    if args.config:
        return ExperimentConfig.from_json(args.config, **overrides)
    return ExperimentConfig(**{k: v for k, v in overrides.items() if v is not None})


def build_parser():
    p = argparse.ArgumentParser(prog='tslod', description='two-stage reduced basis LOD experiments')
    p.add_argument('-v', '--verbose', action='store_true')
    sub = p.add_subparsers(dest='verb', required=True)

    off = sub.add_parser('offline', help='train Stage-1 and Stage-2 models and store them')
    off.add_argument('--config')
    _add_overrides(off)

    val = sub.add_parser('validate', help='evaluate errors, timings and sizes on the validation set')
    val.add_argument('--config')
    val.add_argument('--artifacts', help='artifact directory (default: output_dir of the config)')
    val.add_argument('--out', help='directory for report.json, tables.csv and greedy_trace.csv')
    _add_overrides(val)

    rep = sub.add_parser('report', help='convert a report.json into the CSV table')
    rep.add_argument('--in', dest='input', required=True)
    rep.add_argument('--csv', required=True)

    tr = sub.add_parser('trace', help='print or export the Stage-2 greedy trace of an artifact directory')
    tr.add_argument('--artifacts', required=True)
    tr.add_argument('--csv')
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format='%(levelname)s %(message)s')
    if args.verb == 'offline':
        config = _config(args)
        try:
            art = run_offline(config)
        except GreedyAbort as e:
            print(f'Stage-2 training aborted: {e}', file=sys.stderr)
            print(f'floor {e.floor:.6e}', file=sys.stderr)
            return 2
        print(json.dumps(dict(output_dir=config.output_dir, timings=art.timings, rho=art.rho,
                              stage1_avg_N=float(art.model.sizes().mean()),
                              stage2_N=None if art.rom is None else art.rom.N), indent=2))
        return 0
    if args.verb == 'validate':
        config = _config(args)
        report = run_validate(config, args.artifacts or config.output_dir)
        out = args.out or config.output_dir
        files = report_metrics(report, out)
        print(json.dumps(report.metrics, indent=2))
        for f in files:
            print(f'wrote {f}')
        return 0
    if args.verb == 'report':
        report = Report.from_json(Path(args.input).read_text())
        write_table(report, args.csv)
        return 0
    if args.verb == 'trace':
        trace = read_trace(args.artifacts)
        if args.csv:
            write_trace(trace, args.csv)
        else:
            w = csv.writer(sys.stdout)
            w.writerow(['enrichment', 'N', 'max_estimate'])
            for i, e in enumerate(trace):
                w.writerow([i, e['N'], e['max_estimate']])
        return 0
    return 1


if __name__ == '__main__':
    sys.exit(main())
