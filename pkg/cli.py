#!/usr/bin/env python3
"""
Command-line front end of the ContraNorm lab.

Subcommands: dynamics, spectrum, verify, gradcheck, bench, replay.
Data goes to --out (or stdout when no file is given), logs go to stderr.

Exit codes: 0 success, 1 counterexample or failed check, 2 divergence,
64 usage error, 66 missing or malformed input file.
"""

import argparse
import csv
import io
import json
import logging
import sys
from typing import Any, Dict, Iterable, List, Optional, Tuple

import dynamics
import s3_storage
import verify
from dynamics import (
    DivergenceError,
    DynamicsConfig,
    GraphKind,
    InputFormatError,
    NormPosition,
    OperatorKind,
    Propagation,
)
from lab_config import LabSettings, configure_logging, get_settings
from metrics import LayerDiagnostics, near_zero_count
from norms import NormalizerConfig, NormVariant, PairNormMode
from numerics import ContractViolationError, LabError, NumericalFailureError
from run_manifest import ManifestError, RunManifest, manifest_path

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_DIVERGENCE = 2
EXIT_USAGE = 64
EXIT_NO_INPUT = 66

PROP_SUITES = {
    '1': 'prop1',
    '2': 'prop2',
    'eigenmap': 'eigenmap',
    'lemma1': 'lemma1',
    'lemma3': 'lemma3',
    'diagdom': 'diagdom',
    'grad': 'grad',
}

COMPARE_ALIASES = {
    'sg': NormVariant.CONTRANORM_SG,
    'full': NormVariant.CONTRANORM_FULL,
    'ad': NormVariant.CONTRANORM_AD,
    'reg': NormVariant.CONTRANORM_REG,
    'd': NormVariant.CONTRANORM_D,
}


class UsageError(LabError):
    """Bad flags or flag combination"""


class InputError(LabError):
    """An input file is missing, unreadable or malformed"""


class LabArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _float_list(text: str) -> Tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(','))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _add_dynamics_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument('--propagation', choices=[x.value for x in Propagation], default='attention')
    p.add_argument('--layers', type=int, default=1)
    p.add_argument('--norm', choices=[x.value for x in NormVariant], default='none')
    p.add_argument('--scale', type=float, default=1.0)
    p.add_argument('--tau', type=float, default=1.0)
    p.add_argument('--tau-attn', type=float, default=1.0)
    p.add_argument('--residual', choices=['on', 'off'], default='off')
    p.add_argument('--norm-position', choices=[x.value for x in NormPosition], default='after')
    p.add_argument('--graph', help='edge list file ("u v" per line)')
    p.add_argument('--features', help='headerless CSV feature file')
    p.add_argument('--gen', choices=[x.value for x in GraphKind])
    p.add_argument('--p-in', type=float, default=0.5)
    p.add_argument('--p-out', type=float, default=0.05)
    p.add_argument('--n', type=int, default=16)
    p.add_argument('--d', type=int, default=8)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--out')
    p.add_argument('--format', choices=['json', 'csv'], default='json')
    p.add_argument('--record-spectrum', action='store_true')
    p.add_argument('--heads', type=int, default=1)
    p.add_argument('--mixing', action='store_true')
    p.add_argument('--operator', choices=[x.value for x in OperatorKind], default='symmetric')
    p.add_argument('--pairnorm-mode', choices=[x.value for x in PairNormMode], default='pn-si')
    p.add_argument('--pairnorm-scale', type=float, default=1.0)
    p.add_argument('--temper-logits', action='store_true')
    p.add_argument('--gamma', type=_float_list)
    p.add_argument('--beta', type=_float_list)
    p.add_argument('--eps', type=float, default=1e-5)
    p.add_argument('--archive', action='store_true', help='upload output and manifest to S3')


def build_parser() -> LabArgumentParser:
    parser = LabArgumentParser(prog='contranorm', description='ContraNorm numerical lab')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('dynamics', help='propagate features through a layer stack')
    _add_dynamics_flags(p)

    p = sub.add_parser('spectrum', help='per-layer singular values for one or more norm variants')
    _add_dynamics_flags(p)
    p.add_argument('--compare', help='comma-separated variants, e.g. sg,full')

    p = sub.add_parser('verify', help='randomized checks of the propositions and lemmas')
    p.add_argument('--prop', choices=list(PROP_SUITES) + ['all'], required=True)
    p.add_argument('--instances', type=int, default=1000)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--workers', type=int)
    p.add_argument('--out')
    p.add_argument('--archive', action='store_true')
    p.add_argument('--bound-shift', type=float, default=0.0, help=argparse.SUPPRESS)

    p = sub.add_parser('gradcheck', help='analytic vs finite-difference uniformity gradient')
    p.add_argument('--n', type=int, required=True)
    p.add_argument('--d', type=int, required=True)
    p.add_argument('--tau', type=float, required=True)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--out')

    p = sub.add_parser('bench', help='ContraNorm-D vs ContraNorm wall-clock scaling in n')
    p.add_argument('--n-small', type=int, default=1000)
    p.add_argument('--n-large', type=int, default=10000)
    p.add_argument('--d', type=int, default=32)
    p.add_argument('--repeats', type=int, default=3)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--out')

    p = sub.add_parser('replay', help='re-run the command recorded in a manifest')
    p.add_argument('manifest')

    return parser


# ---------------------------------------------------------------------------
# configuration

def _normalizer(args, variant: Optional[NormVariant] = None) -> NormalizerConfig:
    return NormalizerConfig(
        variant=variant or NormVariant(args.norm),
        scale=args.scale,
        tau=args.tau,
        gamma=args.gamma,
        beta=args.beta,
        layernorm_eps=args.eps,
        pairnorm_scale=args.pairnorm_scale,
        pairnorm_mode=args.pairnorm_mode,
        temper_logits=args.temper_logits,
    )


def _dynamics_config(args, variant: Optional[NormVariant] = None) -> DynamicsConfig:
    return DynamicsConfig(
        propagation=args.propagation,
        depth=args.layers,
        residual=args.residual == 'on',
        norm=_normalizer(args, variant),
        norm_position=args.norm_position,
        tau_attn=args.tau_attn,
        seed=args.seed,
        record_spectrum=args.record_spectrum,
        heads=args.heads,
        operator_kind=args.operator,
        mixing=args.mixing,
    )


def _load_inputs(args, manifest: RunManifest):
    """Features and (for GCN) the graph, from files or generated from the seed"""
    try:
        graph = None
        if args.propagation == Propagation.GCN.value and args.graph:
            graph = dynamics.load_graph(args.graph)
            manifest.add_input(args.graph)

        if args.features:
            features = dynamics.load_features(args.features)
            manifest.add_input(args.features)
        else:
            n = graph.node_count if graph is not None else args.n
            if n < 1 or args.d < 1:
                raise UsageError(f"--n and --d must be positive, got {n} and {args.d}")
            features = dynamics.standard_features(n, args.d, args.seed)

        if args.propagation == Propagation.GCN.value:
            if graph is None:
                if not args.gen:
                    raise UsageError("GCN propagation needs --graph or --gen")
                graph = dynamics.generate_graph(args.gen, features.shape[0], args.p_in, args.p_out, args.seed)
            dynamics.check_alignment(graph, features)
        return features, graph
    except (OSError, InputFormatError) as e:
        raise InputError(str(e)) from e
    except ContractViolationError as e:
        if args.features or args.graph:
            raise InputError(str(e)) from e
        raise


# ---------------------------------------------------------------------------
# serialization

def _csv_value(value) -> str:
    if value is None:
        return ''
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        return format(value, '.17g')
    return str(value)


def _json_line(record: Dict[str, Any]) -> str:
    return json.dumps(record, allow_nan=False) + '\n'


def render_layers(records: List[LayerDiagnostics], fmt: str, record_spectrum: bool) -> str:
    buf = io.StringIO()
    if fmt == 'json':
        for rec in records:
            row = rec.to_record(include_spectrum=record_spectrum)
            if not record_spectrum:
                del row['singular_values']
            buf.write(_json_line(row))
        return buf.getvalue()

    q = max((len(r.singular_values) for r in records), default=0) if record_spectrum else 0
    writer = csv.writer(buf, lineterminator='\n')
    writer.writerow(list(LayerDiagnostics.FIELDS) + [f"sv_{i}" for i in range(1, q + 1)])
    for rec in records:
        row = [_csv_value(getattr(rec, name)) for name in LayerDiagnostics.FIELDS]
        if record_spectrum:
            values = rec.singular_values.as_list()
            row += [_csv_value(v) for v in values] + [''] * (q - len(values))
        writer.writerow(row)
    return buf.getvalue()


def render_spectra(spectra: Dict[str, List[LayerDiagnostics]], fmt: str) -> str:
    buf = io.StringIO()
    if fmt == 'json':
        for name, records in spectra.items():
            for rec in records:
                buf.write(_json_line({
                    'variant': name,
                    'layer_index': rec.layer_index,
                    'near_zero_count': near_zero_count(rec.singular_values),
                    'singular_values': rec.singular_values.as_list(),
                }))
        return buf.getvalue()

    q = max((len(r.singular_values) for recs in spectra.values() for r in recs), default=0)
    writer = csv.writer(buf, lineterminator='\n')
    writer.writerow(['variant', 'layer_index', 'near_zero_count'] + [f"sv_{i}" for i in range(1, q + 1)])
    for name, records in spectra.items():
        for rec in records:
            values = rec.singular_values.as_list()
            writer.writerow([name, rec.layer_index, near_zero_count(rec.singular_values)]
                            + [_csv_value(v) for v in values] + [''] * (q - len(values)))
    return buf.getvalue()


def _write(out: Optional[str], text: str) -> None:
    if out is None:
        sys.stdout.write(text)
        sys.stdout.flush()
        return
    try:
        with open(out, 'w', encoding='utf-8', newline='') as f:
            f.write(text)
    except OSError as e:
        raise InputError(f"cannot write {out}: {e}") from e
    logger.info(f"Wrote {out}")


def _finish(args, manifest: RunManifest, exit_code: int, settings: LabSettings) -> int:
    """Write the manifest sidecar and archive the run when requested"""
    if not args.out:
        return exit_code
    manifest.outputs = [args.out]
    manifest.finish(exit_code)
    sidecar = manifest.save(manifest_path(args.out))
    if getattr(args, 'archive', False):
        archived = s3_storage.archive_run_outputs([args.out, sidecar], manifest.to_dict(),
                                                  manifest.digest(), settings)
        if archived is None:
            logger.warning("Archival to S3 failed; local outputs are unaffected")
    return exit_code


# ---------------------------------------------------------------------------
# commands

def cmd_dynamics(args, manifest: RunManifest, settings: LabSettings) -> int:
    cfg = _dynamics_config(args)
    manifest.config = dict(manifest.config, resolved=cfg.to_dict())
    features, graph = _load_inputs(args, manifest)

    exit_code = EXIT_OK
    try:
        records = dynamics.run(features, cfg, graph)
    except DivergenceError as e:
        logger.error(f"Run diverged at layer {e.layer_index}; writing {len(e.partial)} records")
        records = e.partial
        exit_code = EXIT_DIVERGENCE

    _write(args.out, render_layers(records, args.format, args.record_spectrum))
    return _finish(args, manifest, exit_code, settings)


def _compare_variants(args) -> List[Tuple[str, NormVariant]]:
    if not args.compare:
        return [(args.norm, NormVariant(args.norm))]
    variants = []
    for name in (x.strip() for x in args.compare.split(',')):
        if not name:
            continue
        if name in COMPARE_ALIASES:
            variants.append((name, COMPARE_ALIASES[name]))
            continue
        try:
            variants.append((name, NormVariant(name)))
        except ValueError:
            raise UsageError(f"unknown variant {name!r} in --compare")
    if not variants:
        raise UsageError("--compare names no variant")
    return variants


def cmd_spectrum(args, manifest: RunManifest, settings: LabSettings) -> int:
    if not args.record_spectrum:
        raise UsageError("spectrum requires --record-spectrum")
    variants = _compare_variants(args)
    configs = [(name, _dynamics_config(args, variant)) for name, variant in variants]
    manifest.config = dict(manifest.config, resolved={name: cfg.to_dict() for name, cfg in configs})
    features, graph = _load_inputs(args, manifest)

    exit_code = EXIT_OK
    spectra = {}
    for name, cfg in configs:
        try:
            spectra[name] = dynamics.run(features, cfg, graph)
        except DivergenceError as e:
            logger.error(f"{name} diverged at layer {e.layer_index}")
            spectra[name] = e.partial
            exit_code = EXIT_DIVERGENCE

    _write(args.out, render_spectra(spectra, args.format))
    return _finish(args, manifest, exit_code, settings)


def cmd_verify(args, manifest: RunManifest, settings: LabSettings) -> int:
    if args.instances < 1:
        raise UsageError(f"--instances must be positive, got {args.instances}")
    names = list(verify.SUITES) if args.prop == 'all' else [PROP_SUITES[args.prop]]
    workers = args.workers or settings.verify_workers

    results = []
    for name in names:
        result = verify.run_suite(name, args.instances, seed=args.seed, workers=workers,
                                  bound_shift=args.bound_shift, progress=settings.show_progress())
        print(result.summary(), file=sys.stderr)
        results.append(result)

    passed = all(r.passed for r in results)
    if args.out:
        _write(args.out, json.dumps({'passed': passed, 'suites': [r.to_dict() for r in results]},
                                    indent=2, allow_nan=False) + '\n')
    return _finish(args, manifest, EXIT_OK if passed else EXIT_CHECK_FAILED, settings)


def cmd_gradcheck(args, manifest: RunManifest, settings: LabSettings) -> int:
    if args.n < 1 or args.d < 1:
        raise UsageError(f"--n and --d must be positive, got {args.n} and {args.d}")
    h = dynamics.standard_features(args.n, args.d, args.seed)
    report = verify.gradient_check(h, args.tau)
    status = "PASS" if report.passed else "FAIL"
    print(f"gradcheck: {status} max_rel_error={report.max_rel_error:.3e} "
          f"tolerance={report.tolerance:.0e}", file=sys.stderr)
    if args.out:
        _write(args.out, json.dumps(dict(report.to_dict(), passed=report.passed), allow_nan=False) + '\n')
    return _finish(args, manifest, EXIT_OK if report.passed else EXIT_CHECK_FAILED, settings)


def cmd_bench(args, manifest: RunManifest, settings: LabSettings) -> int:
    if not 1 <= args.n_small < args.n_large:
        raise UsageError("need 1 <= --n-small < --n-large")
    lines = []
    for variant in (NormVariant.CONTRANORM_D, NormVariant.CONTRANORM_SG):
        timing = verify.scaling_ratio(variant, args.n_small, args.n_large, args.d,
                                      seed=args.seed, repeats=args.repeats)
        logger.info(f"{variant.value}: ratio {timing['ratio']:.2f}")
        lines.append(_json_line(timing))
    _write(args.out, ''.join(lines))
    return _finish(args, manifest, EXIT_OK, settings)


def cmd_replay(args, manifest: RunManifest, settings: LabSettings) -> int:
    try:
        recorded = RunManifest.load(args.manifest)
    except (OSError, ManifestError) as e:
        raise InputError(str(e)) from e
    if recorded.command == 'replay' or not recorded.argv:
        raise UsageError(f"{args.manifest} does not record a replayable command")
    for path in recorded.changed_inputs():
        logger.warning(f"Input {path} changed since the recorded run; outputs may differ")
    logger.info(f"Replaying: {' '.join(recorded.argv)}")
    return main(recorded.argv)


COMMANDS = {
    'dynamics': cmd_dynamics,
    'spectrum': cmd_spectrum,
    'verify': cmd_verify,
    'gradcheck': cmd_gradcheck,
    'bench': cmd_bench,
    'replay': cmd_replay,
}


def main(argv: Optional[Iterable[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    settings = get_settings()
    configure_logging(settings)
    parser = build_parser()

    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:
        # --help
        return e.code if isinstance(e.code, int) else EXIT_OK

    config = {k: v for k, v in vars(args).items()}
    manifest = RunManifest(command=args.command, argv=argv, config={'flags': config},
                           seed=getattr(args, 'seed', None))
    try:
        return COMMANDS[args.command](args, manifest, settings)
    except UsageError as e:
        logger.error(str(e))
        return EXIT_USAGE
    except InputError as e:
        logger.error(str(e))
        return EXIT_NO_INPUT
    except ContractViolationError as e:
        logger.error(f"Invalid configuration: {e}")
        return EXIT_USAGE
    except NumericalFailureError as e:
        logger.error(f"Numerical failure: {e}")
        return EXIT_DIVERGENCE


if __name__ == '__main__':
    sys.exit(main())
