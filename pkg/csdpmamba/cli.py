#!/usr/bin/env python

"""Contrastive similarity-graph classifier for multivariate time series.

Stages run in order pretrain, simmatrix, train; every later command
computes the artifacts it is missing and reuses the ones already registered
in the output directory. Exit codes: 2 for bad input or configuration,
3 for numeric failures, 4 for a failed gradient check.
"""

import argparse
import json
import logging
import sys

from csdpmamba import trainer
from csdpmamba.config import MODES, TrainConfig
from csdpmamba.errors import ConfigError, CsdpError
from csdpmamba.pipeline import Pipeline


log = logging.getLogger('csdpmamba')
log.addHandler(logging.NullHandler())

COMMANDS = ('pretrain', 'simmatrix', 'train', 'eval', 'ablate', 'sweep', 'gradcheck')
DEFAULT_FRACTIONS = '0.05,0.1,1.0'

_handler = None


def _switch(parser, flag, help_text):
    # absent switches stay None so the config file keeps its say
    parser.add_argument(flag, default=None, action='store_const', const=True, help=help_text)


def setupArgsParser():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument('command',
                        choices=COMMANDS,
                        help='Stage to run')
    parser.add_argument('--data',
                        default=None,
                        help='Dataset: a .ts train file or a long CSV with a split column')
    parser.add_argument('--test-data',
                        default=None,
                        help='Test split of a .ts dataset')
    parser.add_argument('--config',
                        default=None,
                        help='JSON file with TrainConfig fields, overridden by explicit flags')
    parser.add_argument('--out-dir',
                        default=None,
                        help='Output directory, by default $CSDP_OUT_DIR or ./csdp_out')
    parser.add_argument('--seed', default=None, type=int, help='Seed of every random draw')
    parser.add_argument('--epochs',
                        default=None,
                        type=int,
                        help='Epoch budget of the command: pretraining epochs for pretrain, training epochs otherwise')
    parser.add_argument('--pretrain-epochs', default=None, type=int, help='Contrastive pretraining epochs')
    parser.add_argument('--batch-size', default=None, type=int, help='Batch size, by default min(N, 64)')
    parser.add_argument('--lr', default=None, type=float, help='Initial learning rate')
    parser.add_argument('--workers',
                        default=None,
                        type=int,
                        help='Worker threads for matrix construction and batch encoding')
    parser.add_argument('--alpha', default=None, type=float, help='Adjacency scaling exp(-alpha * D)')
    parser.add_argument('--topk', default=None, type=int, help='Neighbors kept per graph row')
    parser.add_argument('--radius', default=None, type=int, help='FastDTW radius')
    parser.add_argument('--graph-order',
                        default=None,
                        choices=('masked', 'raw'),
                        help='Mask cross-cluster sentinels before the exponential, or apply it literally')
    parser.add_argument('--fastdtw-variant', default=None, choices=('canonical', 'truncated'))
    parser.add_argument('--loss-convention', default=None, choices=('standard', 'swapped'),
                        help='standard: similar pairs are pulled together; swapped: the label roles are exchanged')
    _switch(parser, '--inverse-weights', 'Apply 1 / (1 + w) on top of the exponential edge scaling')
    _switch(parser, '--ssm-dense-a', 'Learn a dense SSM transition matrix')
    _switch(parser, '--split-paths', 'Separate SSM parameters for the reverse path')
    _switch(parser, '--gin-unweighted', 'Plain neighbor sums in the GIN layers')
    _switch(parser, '--raw', 'Distances between the raw series instead of learned representations')
    parser.add_argument('--no-normalize',
                        default=None,
                        action='store_const',
                        const=False,
                        dest='normalize',
                        help='Keep series as read instead of z-normalizing them')
    parser.add_argument('--mode', default=None, choices=MODES, help='Model variant to train')
    parser.add_argument('--label-fraction', default=None, type=float,
                        help='Share of train labels visible to the loss')
    parser.add_argument('--fractions',
                        default=DEFAULT_FRACTIONS,
                        help='Comma separated label fractions for sweep, default {}'.format(DEFAULT_FRACTIONS))
    parser.add_argument('--representations',
                        default=False,
                        action='store_true',
                        help='ablate: also compare raw-series FastDTW with representation FastDTW')
    parser.add_argument('--force',
                        default=False,
                        action='store_true',
                        help='Recompute stages even when their artifacts are up to date')
    parser.add_argument('--timeout',
                        default=10,
                        type=int,
                        help=('SQLite connection timeout of the stage registry. Default is 10 seconds. Increase'
                              ' if you get occasional "database is locked" errors'))
    parser.add_argument('--log',
                        default=None,
                        help='Path to log file, by default log to STDERR')
    parser.add_argument('--debug',
                        default=False,
                        action='store_true',
                        help='Show debug output and fail on the first NaN or Inf during training')
    return parser


def setupLogger(log_file, debug):
    global _handler
    formatter = logging.Formatter('%(asctime)s %(levelname)s %(message)s')
    lh = log_file is None and logging.StreamHandler() or logging.FileHandler(log_file)
    lh.setLevel(debug and logging.DEBUG or logging.INFO)
    lh.setFormatter(formatter)
    log = logging.getLogger('csdpmamba')
    log.setLevel(logging.DEBUG)
    if _handler is not None:
        log.removeHandler(_handler)
        _handler.close()
    log.addHandler(lh)
    _handler = lh


def parse_fractions(text):
    try:
        return [float(f) for f in text.split(',') if f.strip()]
    except ValueError:
        raise ConfigError('--fractions expects comma separated numbers, got {!r}'.format(text))


def overrides_from_args(args):
    """TrainConfig fields set on the command line; unset flags are None."""
    overrides = {
        'seed': args.seed,
        'pretrain_epochs': args.pretrain_epochs,
        'batch_size': args.batch_size,
        'lr': args.lr,
        'workers': args.workers,
        'alpha': args.alpha,
        'topk': args.topk,
        'radius': args.radius,
        'graph_order': args.graph_order,
        'fastdtw_variant': args.fastdtw_variant,
        'loss_convention': args.loss_convention,
        'inverse_weights': args.inverse_weights,
        'ssm_dense_a': args.ssm_dense_a,
        'split_paths': args.split_paths,
        'gin_unweighted': args.gin_unweighted,
        'raw_matrix': args.raw,
        'normalize': args.normalize,
        'mode': args.mode,
        'label_fraction': args.label_fraction,
        'out_dir': args.out_dir,
        'debug': True if args.debug else None,
    }
    if args.epochs is not None:
        overrides['pretrain_epochs' if args.command == 'pretrain' else 'epochs'] = args.epochs
    return overrides


def run_gradcheck(cfg):
    results = trainer.gradcheck_battery(cfg.seed)
    for name, error in results.items():
        print('{:<20} {:.3e} {}'.format(name, error, 'ok' if error <= trainer.GRADCHECK_TOLERANCE else 'FAILED'))
    trainer.check_gradients(results)
    return 0


def run_command(args, cfg):
    if args.command == 'gradcheck':
        Pipeline(cfg).write_manifest(args.command)
        return run_gradcheck(cfg)
    if args.data is None:
        raise ConfigError('{} needs --data'.format(args.command))
    pipeline = Pipeline(cfg, force=args.force, timeout=args.timeout)
    try:
        pipeline.start(args.command, args.data, args.test_data)
        if args.command == 'pretrain':
            _, trace = pipeline.pretrain()
            print('Encoder checkpoint {} ({} epochs)'.format(pipeline.path('temcl.ckpt'), len(trace)))
        elif args.command == 'simmatrix':
            enc = None if cfg.raw_matrix else pipeline.pretrain()[0]
            similarity = pipeline.similarity(enc)
            print('Distance matrix over {} nodes written to {}'.format(similarity.matrix.shape[0], cfg.out_dir))
        elif args.command == 'train':
            metrics = pipeline.train()
            print(json.dumps(metrics.summary(), sort_keys=True))
        elif args.command == 'eval':
            print(json.dumps(pipeline.evaluate(), sort_keys=True))
        elif args.command == 'ablate':
            frame = pipeline.ablate(representations=args.representations)
            print(frame.to_string(index=False))
        elif args.command == 'sweep':
            frame = pipeline.sweep(parse_fractions(args.fractions))
            print(frame.to_string(index=False))
    finally:
        pipeline.close()
    return 0


def main(argv=None):
    args_parser = setupArgsParser()
    args = args_parser.parse_args(argv)
    setupLogger(args.log, args.debug)
    try:
        cfg = TrainConfig.load(args.config, overrides_from_args(args))
        return run_command(args, cfg)
    except (KeyboardInterrupt, SystemExit):
        log.info('Shutting down')
        raise
    except CsdpError as e:
        log.error('%s failed: %s', args.command, e)
        return e.exit_code
    except Exception:
        log.exception('%s failed', args.command)
        return 1


def run():
    sys.exit(main())


if __name__ == '__main__':
    run()
