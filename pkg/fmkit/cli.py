import contextlib
import pathlib
import sys
from argparse import ArgumentParser, Namespace
from typing import List, Optional, Dict, Callable

import jsonpickle
import numpy as np
import pandas as pd

from fmkit.data.dataset import FeatureDataset
from fmkit.data.features import read_manifest, Manifest, bucket_by_duration, ManifestError, FeatureFileError
from fmkit.data.synth import synth_dataset, synth_default_splits, ArtifactSpec
from fmkit.encoders.config import BlockConfig, Variant, BIMAMBA_VARIANTS, ABLATION_FLAGS
from fmkit.encoders.layers import parameter_count
from fmkit.metrics.bench import measure_rtf, complexity_probe, plot_rtf
from fmkit.metrics.eer import compute_eer, eer_by_bucket, ScoreSet, relative_improvement, EmptyClassError
from fmkit.models import Label
from fmkit.pipeline.checkpoint import load_checkpoint, CheckpointError
from fmkit.pipeline.model import ModelConfig, build_model, DetectorModel
from fmkit.training.gradcheck import gradcheck, tiny_config
from fmkit.training.trainer import TrainConfig, train, evaluate, make_loader, DivergenceError, AVERAGED_CHECKPOINT
from fmkit.utils.config import read_config, reset_config, Config, ConfigError
from fmkit.utils.printing import suppress_print, warn
from fmkit.utils.runtime import configure_runtime, RunLock, LockError

VERSION = '0.3.0'

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_DIVERGED = 3

CONFIG_SNAPSHOT = 'config.json'


class UsageError(Exception):
    pass


def write_records(loc: pathlib.Path, records: List[dict]):
    with open(loc, 'w') as fp:
        for r in records:
            fp.write(jsonpickle.encode(r, unpicklable=False))
            fp.write('\n')


def apply_flags(config: Config, args: Namespace, mapping: Dict[str, str]):
    """Copies every flag the user actually gave into its dotted config key."""
    for attr, key in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            config.set(key, value)


def model_config(config: Config, c_in: int, block: Optional[BlockConfig] = None) -> ModelConfig:
    if block is None:
        block = BlockConfig.from_dict(config.values['block'])
    block.validate()
    return ModelConfig(c_in, block, config.model.head_hidden, config.model.seed)


def default_manifest(config: Config, given: Optional[pathlib.Path], split: str) -> pathlib.Path:
    return given if given is not None else pathlib.Path(config.data.root) / f'{split}.tsv'


def load_split(loc: pathlib.Path) -> Manifest:
    manifest = read_manifest(loc)
    if len(manifest) == 0:
        raise UsageError(f'{loc} lists no utterances')
    manifest.validate()
    return manifest


def cmd_synth(args: Namespace, config: Config, out: pathlib.Path) -> int:
    data = config.data
    frame_range = (int(round(data.min_duration * data.frame_rate)), int(round(data.max_duration * data.frame_rate)))
    artifact = ArtifactSpec(amplitude=data.amplitude)
    progress = not args.quiet

    if args.default_splits:
        manifests = synth_default_splits(out, config.run.seed, data.channels, frame_range, artifact,
                                         data.frame_rate, data.workers, progress)
    else:
        manifests = {args.name: synth_dataset(out, data.n_real, data.n_fake, frame_range, data.channels,
                                              config.run.seed, artifact, frame_rate=data.frame_rate,
                                              paired=data.paired, name=args.name, workers=data.workers,
                                              progress=progress)}

    for name, manifest in manifests.items():
        counts = manifest.label_counts()
        print(f'{out / (name + ".tsv")}: {counts[Label.REAL]} real, {counts[Label.FAKE]} fake, '
              f'{manifest.channels} channels @ {manifest.frame_rate} frames/s')
    return EXIT_OK


def cmd_train(args: Namespace, config: Config, out: pathlib.Path) -> int:
    train_cfg = TrainConfig.from_dict(config.values['train'], config.run.seed, config.data.workers)
    if train_cfg.max_epochs == 0:
        print('max_epochs is 0, nothing to train')
        return EXIT_OK

    train_manifest = load_split(default_manifest(config, args.train, 'train'))
    dev_manifest = load_split(default_manifest(config, args.dev, 'dev'))
    if train_manifest.channels != dev_manifest.channels:
        raise UsageError(f'train has {train_manifest.channels} channels, dev has {dev_manifest.channels}')

    train_set = FeatureDataset(train_manifest, train_cfg.segment_frames(train_manifest.frame_rate), train_cfg.seed)
    dev_set = FeatureDataset(dev_manifest)

    model = build_model(model_config(config, train_manifest.channels))
    print(f'{model.cfg.block.variant.value}: {model.cfg.block.n_blocks} blocks, D={model.cfg.d_model}, '
          f'{parameter_count(model)} parameters')
    print(f'training on {len(train_set)} utterances, validating on {len(dev_set)}, lr {train_cfg.lr:g}')

    result = train(model, train_set, dev_set, train_cfg, out, progress=not args.quiet)
    best = min(result.history, key=lambda r: (r.dev_eer, r.epoch))
    print(f'{result.epochs} epochs{" (early stop)" if result.stopped_early else ""}, best dev EER '
          f'{100 * best.dev_eer:.2f}% at epoch {best.epoch}, averaged epochs {result.averaged_epochs}')
    print(f'wrote {out / AVERAGED_CHECKPOINT}')
    return EXIT_OK


def score_manifest(model: DetectorModel, manifest: Manifest, batch_size: int) -> pd.DataFrame:
    if manifest.channels != model.cfg.c_in:
        raise UsageError(f'the manifest has {manifest.channels} channels, the checkpoint expects {model.cfg.c_in}')
    manifest = manifest.sorted()
    output = evaluate(model, make_loader(FeatureDataset(manifest), batch_size))
    durations = {e.id: e.duration(manifest.frame_rate) for e in manifest.entries}
    return pd.DataFrame({
        'id': output.ids,
        'label': [str(Label(int(v))) for v in output.labels],
        'score': output.scores,
        'duration_s': [durations[i] for i in output.ids],
    })


def frame_scores(scores: pd.DataFrame) -> ScoreSet:
    return ScoreSet(scores[scores['label'] == str(Label.REAL)]['score'],
                    scores[scores['label'] == str(Label.FAKE)]['score'])


def scores_by_bucket(scores: pd.DataFrame, manifest: Manifest, edges: List[float]) -> Dict[str, ScoreSet]:
    indexed = scores.set_index('id')
    buckets = {}
    for name, entries in bucket_by_duration(manifest, edges).items():
        buckets[name] = frame_scores(indexed.loc[[e.id for e in entries]])
    return buckets


def cmd_eval(args: Namespace, config: Config, out: pathlib.Path) -> int:
    manifest = load_split(args.manifest)
    counts = manifest.label_counts()
    if min(counts[Label.REAL], counts[Label.FAKE]) == 0:
        raise UsageError(f'{args.manifest} needs both classes for an EER, it has {counts[Label.REAL]} real and '
                         f'{counts[Label.FAKE]} fake utterances')
    model = load_checkpoint(args.checkpoint).build()
    scores = score_manifest(model, manifest, args.batch_size)

    pooled = compute_eer(frame_scores(scores))
    table = eer_by_bucket(scores_by_bucket(scores, manifest, config.data.bucket_edges))

    print(f'{args.manifest}: {pooled}')
    print(table)
    records = [dict(r, kind='bucket') for r in table.to_frame().replace({np.nan: None}).to_dict('records')]
    if args.baseline_eer is not None:
        improvement = relative_improvement(args.baseline_eer, pooled.eer)
        print(f'relative improvement over {100 * args.baseline_eer:.2f}%: {100 * improvement:.1f}%')
        records.append({'kind': 'baseline', 'baseline_eer': args.baseline_eer, 'relative_improvement': improvement})

    scores.to_csv(out / 'scores.tsv', sep='\t', index=False)
    write_records(out / 'eval.jsonl', records)
    if args.csv:
        table.to_frame().to_csv(out / 'eval.csv', index=False)
    return EXIT_OK


def cmd_bench(args: Namespace, config: Config, out: pathlib.Path) -> int:
    bench = config.bench
    report = None
    for variant in bench.variants:
        block = BlockConfig.from_dict(config.values['block']).replace(variant=variant, dropout=0.)
        model = build_model(model_config(config, config.data.channels, block))
        rtf = measure_rtf(model, bench.durations, bench.runs, bench.warmup_runs, config.data.frame_rate,
                          precision=bench.precision, seed=config.run.seed, progress=not args.quiet)
        report = rtf if report is None else report.extend(rtf)

    records = [dict(r, kind='rtf') for r in report.records()]
    print(f'real-time factor ({report.mode}, float{report.precision}, {bench.warmup_runs} warm-up runs)')
    print(report.to_frame()[['model', 'duration_s', 'frames', 'runs', 'mean_rtf', 'std_rtf']].to_string(index=False))
    if report.timer_warning:
        warn('timer resolution is coarser than 1% of a measured run, RTF values are unreliable')

    probe = None
    if not args.no_probe:
        probe = complexity_probe(bench.variants, bench.lengths, bench.probe_d_model, bench.probe_runs,
                                 seed=config.run.seed, progress=not args.quiet)
        print(probe.pivot().to_string())
        for variant, slope in probe.slopes.items():
            print(f'{variant}: time ~ T^{slope:.2f}')
            records.append({'kind': 'slope', 'variant': variant, 'slope': slope})
        records.extend(dict(r, kind='probe') for r in probe.times.to_dict('records'))

    write_records(out / 'bench.jsonl', records)
    if args.csv:
        report.to_frame().to_csv(out / 'bench.csv', index=False)
    if args.plot is not None:
        plot_rtf(report, args.plot, probe)
    return EXIT_OK


def cmd_gradcheck(args: Namespace, config: Config, out: pathlib.Path) -> int:
    variants = [Variant.parse(args.variant)] if args.variant is not None else BIMAMBA_VARIANTS
    failed = False
    records = []
    for variant in variants:
        report = gradcheck(tiny_config(variant, config.run.seed), args.tolerance, args.coords, config.run.seed)
        print(report)
        records.append({'variant': variant.value, 'max_error': report.max_error, 'passed': report.passed,
                        'failed_parameters': report.failed_parameters})
        if not report.passed:
            failed = True
            for check in report.failures[:10]:
                print(f'  {check}', file=sys.stderr)
    write_records(out / 'gradcheck.jsonl', records)
    return EXIT_CHECK_FAILED if failed else EXIT_OK


def ablation_settings(block: BlockConfig) -> Dict[str, BlockConfig]:
    settings = {'full': block.replace(**{f: False for f in ABLATION_FLAGS})}
    for flag in ABLATION_FLAGS:
        settings[flag] = settings['full'].replace(**{flag: True})
    return settings


def cmd_ablate(args: Namespace, config: Config, out: pathlib.Path) -> int:
    train_manifest = load_split(default_manifest(config, args.train, 'train'))
    dev_manifest = load_split(default_manifest(config, args.dev, 'dev'))
    test_manifest = load_split(default_manifest(config, args.test, 'test'))
    base_cfg = TrainConfig.from_dict(config.values['train'], config.run.seed, config.data.workers)
    dev_set = FeatureDataset(dev_manifest)

    records = []
    for name, block in ablation_settings(BlockConfig.from_dict(config.values['block'])).items():
        for seed in args.seeds:
            cfg = TrainConfig.from_dict(dict(config.values['train'], seed=seed), seed, config.data.workers)
            train_set = FeatureDataset(train_manifest, cfg.segment_frames(train_manifest.frame_rate), seed)
            mc = model_config(config, train_manifest.channels, block)
            mc.seed = seed
            model = build_model(mc)
            print(f'{name} seed {seed}: {parameter_count(model)} parameters')
            if base_cfg.max_epochs > 0:
                train(model, train_set, dev_set, cfg, out / name / f'seed_{seed}', progress=not args.quiet)
            scores = score_manifest(model, test_manifest, cfg.batch_size)
            eer = compute_eer(frame_scores(scores)).eer
            records.append({'setting': name, 'seed': seed, 'test_eer': eer})

    frame = pd.DataFrame.from_records(records)
    summary = frame.groupby('setting', sort=False)['test_eer'].agg(['mean', 'std', 'count']).reset_index()
    full = summary.loc[summary['setting'] == 'full', 'mean'].iloc[0]
    summary['vs_full'] = summary['mean'] - full
    print(summary.to_string(index=False))
    write_records(out / 'ablate.jsonl', records)
    return EXIT_OK


COMMANDS: Dict[str, Callable[[Namespace, Config, pathlib.Path], int]] = {
    'synth': cmd_synth,
    'train': cmd_train,
    'eval': cmd_eval,
    'bench': cmd_bench,
    'gradcheck': cmd_gradcheck,
    'ablate': cmd_ablate,
}

FLAG_KEYS: Dict[str, Dict[str, str]] = {
    'synth': {
        'n_real': 'data.n_real', 'n_fake': 'data.n_fake', 'channels': 'data.channels',
        'min_duration': 'data.min_duration', 'max_duration': 'data.max_duration', 'amplitude': 'data.amplitude',
        'paired': 'data.paired', 'workers': 'data.workers',
    },
    'train': {
        'variant': 'block.variant', 'blocks': 'block.n_blocks', 'd_model': 'block.d_model',
        'max_epochs': 'train.max_epochs', 'lr': 'train.lr', 'preset': 'train.preset',
        'batch_size': 'train.batch_size', 'disable_pre_ln': 'block.disable_pre_ln', 'disable_ffn': 'block.disable_ffn',
        'disable_bidirectional': 'block.disable_bidirectional', 'disable_pooling': 'block.disable_pooling',
    },
    'ablate': {
        'variant': 'block.variant', 'blocks': 'block.n_blocks', 'max_epochs': 'train.max_epochs',
    },
    'bench': {
        'variants': 'bench.variants', 'durations': 'bench.durations', 'runs': 'bench.runs',
        'warmup': 'bench.warmup_runs', 'lengths': 'bench.lengths', 'precision': 'bench.precision',
        'parallel': 'bench.parallel',
    },
}


def comma_list(kind):
    def parse(text: str):
        return [kind(t.strip()) for t in text.split(',') if t.strip()]
    return parse


def build_parser() -> ArgumentParser:
    common = ArgumentParser(add_help=False)
    common.add_argument('-c', '--config', type=pathlib.Path, default=None,
                        help='JSON settings file, every key is optional')
    common.add_argument('--seed', type=int, default=None, help='seed for every random number generator')
    common.add_argument('--out', type=pathlib.Path, default=None, help='output directory of the run')
    common.add_argument('--deterministic', action='store_true', default=None,
                        help='deterministic kernels on a single thread')
    common.add_argument('--set', action='append', default=[], metavar='SECTION.KEY=VALUE',
                        help='overrides one config value, may be repeated')
    common.add_argument('-q', '--quiet', action='store_true', help='suppresses progress output')

    ap = ArgumentParser(prog='fmkit', description='bidirectional selective state-space encoders for '
                                                  'synthetic-speech detection, trained and evaluated end to end')
    ap.add_argument('-v', '--version', action='store_true', help='print the version string and exit')
    sub = ap.add_subparsers(dest='command')

    sp = sub.add_parser('synth', parents=[common], help='writes a synthetic labeled feature dataset')
    sp.add_argument('--n-real', dest='n_real', type=int, default=None, help='number of real utterances')
    sp.add_argument('--n-fake', dest='n_fake', type=int, default=None, help='number of fake utterances')
    sp.add_argument('--channels', type=int, default=None, help='feature channels per frame')
    sp.add_argument('--min-duration', dest='min_duration', type=float, default=None, help='shortest utterance (s)')
    sp.add_argument('--max-duration', dest='max_duration', type=float, default=None, help='longest utterance (s)')
    sp.add_argument('--amplitude', type=float, default=None, help='artifact amplitude in process std units')
    sp.add_argument('--paired', action='store_true', default=None, help='fake i shares the base process of real i')
    sp.add_argument('--workers', type=int, default=None, help='worker processes for generation')
    sp.add_argument('--name', default='data', help='manifest name when not writing the default splits')
    sp.add_argument('--default-splits', dest='default_splits', action='store_true',
                    help='writes balanced train, dev and test manifests')

    sp = sub.add_parser('train', parents=[common], help='trains a model and averages its best epochs')
    sp.add_argument('--train', type=pathlib.Path, default=None, help='training manifest')
    sp.add_argument('--dev', type=pathlib.Path, default=None, help='development manifest')
    sp.add_argument('--variant', default=None, help=f'one of {", ".join(v.value for v in Variant)}')
    sp.add_argument('--blocks', type=int, default=None, help='number of encoder blocks')
    sp.add_argument('--d-model', dest='d_model', type=int, default=None, help='encoder width')
    sp.add_argument('--max-epochs', dest='max_epochs', type=int, default=None, help='epoch limit')
    sp.add_argument('--lr', type=float, default=None, help='learning rate, overrides the preset')
    sp.add_argument('--preset', choices=['desk', 'full'], default=None, help='training preset')
    sp.add_argument('--batch-size', dest='batch_size', type=int, default=None, help='utterances per batch')
    sp.add_argument('--no-pre-ln', dest='disable_pre_ln', action='store_true', default=None,
                    help='removes the pre-norms')
    sp.add_argument('--no-ffn', dest='disable_ffn', action='store_true', default=None,
                    help='removes the feed-forward')
    sp.add_argument('--no-bidirectional', dest='disable_bidirectional', action='store_true', default=None,
                    help='removes the backward branch')
    sp.add_argument('--no-pooling', dest='disable_pooling', action='store_true', default=None,
                    help='mean pooling instead of attention pooling')

    sp = sub.add_parser('eval', parents=[common], help='scores a manifest with a checkpoint')
    sp.add_argument('--checkpoint', type=pathlib.Path, required=True, help='checkpoint to evaluate')
    sp.add_argument('--manifest', type=pathlib.Path, required=True, help='labeled manifest to score')
    sp.add_argument('--batch-size', dest='batch_size', type=int, default=32, help='utterances per batch')
    sp.add_argument('--baseline-eer', dest='baseline_eer', type=float, default=None,
                    help='EER (fraction) of a reference system for the relative improvement')
    sp.add_argument('--csv', action='store_true', help='also writes the bucket table as CSV')

    sp = sub.add_parser('bench', parents=[common], help='real-time factor and scaling benchmark')
    sp.add_argument('--variants', type=comma_list(str), default=None, help='comma separated variants')
    sp.add_argument('--durations', type=comma_list(float), default=None, help='comma separated seconds')
    sp.add_argument('--runs', type=int, default=None, help='measured runs per duration')
    sp.add_argument('--warmup', type=int, default=None, help='unmeasured warm-up runs per duration')
    sp.add_argument('--lengths', type=comma_list(int), default=None, help='frame grid of the scaling probe')
    sp.add_argument('--precision', type=int, choices=[32, 64], default=None, help='float width while timing')
    sp.add_argument('--parallel', action='store_true', default=None, help='allows multi-threaded kernels')
    sp.add_argument('--no-probe', dest='no_probe', action='store_true', help='skips the scaling probe')
    sp.add_argument('--csv', action='store_true', help='also writes the RTF table as CSV')
    sp.add_argument('--plot', type=pathlib.Path, default=None, help='writes a chart to this path')

    sp = sub.add_parser('gradcheck', parents=[common], help='checks analytic gradients against finite differences')
    sp.add_argument('--variant', default=None, help='encoder to check, all BiMamba variants by default')
    sp.add_argument('--tolerance', type=float, default=1e-4, help='largest accepted relative error')
    sp.add_argument('--coords', type=int, default=60, help='number of sampled coordinates')

    sp = sub.add_parser('ablate', parents=[common], help='trains every ablation over several seeds')
    sp.add_argument('--train', type=pathlib.Path, default=None, help='training manifest')
    sp.add_argument('--dev', type=pathlib.Path, default=None, help='development manifest')
    sp.add_argument('--test', type=pathlib.Path, default=None, help='test manifest')
    sp.add_argument('--seeds', type=comma_list(int), default=[0, 1, 2], help='comma separated seeds')
    sp.add_argument('--variant', default=None, help='encoder variant to ablate')
    sp.add_argument('--blocks', type=int, default=None, help='number of encoder blocks')
    sp.add_argument('--max-epochs', dest='max_epochs', type=int, default=None, help='epoch limit')

    return ap


def run(args: Namespace) -> int:
    overrides = list(args.set)
    reset_config()
    config = read_config(args.config, overrides if len(overrides) > 0 else None)
    apply_flags(config, args, FLAG_KEYS.get(args.command, {}))
    apply_flags(config, args, {'seed': 'run.seed', 'deterministic': 'run.deterministic'})
    # one seed drives data order, runtime and weight initialisation
    apply_flags(config, args, {'seed': 'model.seed'})
    if args.out is not None:
        config.set('run.out', str(args.out))

    out = pathlib.Path(config.run.out) if config.run.out is not None else pathlib.Path('runs') / args.command
    threads = config.run.threads
    if args.command == 'bench' and not config.bench.parallel:
        threads = 1
    configure_runtime(config.run.seed, config.run.deterministic, threads)

    with RunLock(out):
        config.write(out / CONFIG_SNAPSHOT)
        quiet = suppress_print() if args.quiet else contextlib.nullcontext()
        with quiet:
            return COMMANDS[args.command](args, config, out)


def main(argv: Optional[List[str]] = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)

    if args.version:
        print(f'fmkit v{VERSION}')
        return EXIT_OK
    if args.command is None:
        ap.print_help(sys.stderr)
        return EXIT_USAGE

    try:
        return run(args)
    except DivergenceError as e:
        print(f'error: {e}', file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, UsageError, LockError, ManifestError, FeatureFileError, CheckpointError, EmptyClassError,
            ValueError) as e:
        print(f'error: {e}', file=sys.stderr)
        return EXIT_USAGE
