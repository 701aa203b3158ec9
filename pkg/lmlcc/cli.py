"""Command line interface: ``python -m lmlcc <command> [flags]``.

Every command resolves its configuration (defaults < --config file < flags),
logs it and writes it to <out_dir>/resolved-config.yaml. Exit codes: 0
success, 1 usage or configuration error, 2 data error, 3 numerical failure.

"""
from argparse import SUPPRESS, ArgumentParser, Namespace
from dataclasses import fields
from itertools import product
from typing import Callable, Dict, List, Optional, Sequence
import logging
import sys

import pandas as pd
from tqdm.contrib.logging import logging_redirect_tqdm

from os.path import join

from .config import RunConfig, load_config, write_config
from .errors import LmlccError, UsageError
from .ingest import read_ratings
from .labeling import (
    SPLITS, label_records, read_manifest, split_by_nodule, split_manifest,
    write_manifest
)
from .phantom import generate_dataset
from .preprocess import (
    Patch, intensity_profile, preprocess_dataset, read_patch_cache,
    write_patch_cache
)
from .semisup import pseudo_label_manifest, semisup_loop
from .torch.checkpoint import save_checkpoint
from .torch.models import LmlccNet, build_model
from .torch.train_binary_model import train
from .torch.utils import count_parameters
from .torch.validation import evaluate, save_grad_cams
from .utils import create_dirs, require_file, seed_everything

logger = logging.getLogger(__name__)

CONFIG_KEYS = {f.name for f in fields(RunConfig)}


class Parser(ArgumentParser):
    """Argument parser that exits with the usage error code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(UsageError.exit_code, f'{self.prog}: error: {message}\n')


def patch_cache_path(patches_dir: str, split: str) -> str:
    return join(patches_dir, f'{split}.patches')


def read_split(cfg: RunConfig, split: str) -> List[Patch]:
    if cfg.patches_dir is None:
        raise UsageError('--patches-dir is required')

    return read_patch_cache(patch_cache_path(cfg.patches_dir, split))


def write_splits(patches: Dict[str, List[Patch]], patches_dir: str):
    create_dirs([patches_dir])

    for split in SPLITS:
        write_patch_cache(patches.get(split, []),
                          patch_cache_path(patches_dir, split))


def require(cfg: RunConfig, *keys: str):
    missing = [k for k in keys if getattr(cfg, k) is None]

    if missing:
        raise UsageError('missing required option(s): ' + ', '.join(
            '--' + k.replace('_', '-') for k in missing))


def fresh_model(cfg: RunConfig):
    seed_everything(cfg.seed)

    return build_model(cfg.model_config())


def cmd_label(cfg: RunConfig, args: Namespace):
    """Consensus labels and a nodule-wise split manifest."""
    require(cfg, 'ratings')
    labels = label_records(read_ratings(cfg.ratings))
    split = split_by_nodule(labels, cfg.seed, cfg.test_frac, cfg.val_frac)
    manifest = split_manifest(split, labels)
    out = cfg.manifest or join(cfg.out_dir, 'manifest.csv')

    write_manifest(manifest, out)

    counts = pd.Series([v.name.lower() for v in labels.values()],
                       dtype=object).value_counts()
    print(f'benign: {counts.get("benign", 0)}, malignant: '
          f'{counts.get("malignant", 0)}, ambiguous: '
          f'{counts.get("ambiguous", 0)}')
    print(f'train: {len(split.train_ids)}, val: {len(split.val_ids)}, '
          f'test: {len(split.test_ids)}, unlabeled: '
          f'{len(split.unlabeled_ids)}')
    logger.info(f'Wrote manifest to {out}.')


def cmd_preprocess(cfg: RunConfig, args: Namespace):
    """Patch caches per split from volumes, ratings and a manifest."""
    require(cfg, 'ratings', 'manifest', 'volumes_dir')
    patches = preprocess_dataset(
        read_ratings(cfg.ratings), read_manifest(cfg.manifest),
        cfg.volumes_dir, cfg.side, cfg.target_spacing, cfg.augment,
        cfg.num_workers
    )
    write_splits(patches, cfg.patches_dir or cfg.out_dir)


def cmd_train(cfg: RunConfig, args: Namespace):
    """Train on the train split, select on the val split."""
    model = fresh_model(cfg)
    logger.info(f'Trainable parameters: {count_parameters(model)}')

    result = train(model, read_split(cfg, 'train'), read_split(cfg, 'val'),
                   cfg.train_config(), save_dir=cfg.out_dir)

    print(f'best epoch {result.best_epoch}, val loss '
          f'{result.best_val_loss:.4f}')

    if isinstance(result.model, LmlccNet):
        print('cuts: ' + ', '.join(f'{c:.4f}'
                                    for c in result.model.learned_cuts()))


def cmd_pseudolabel(cfg: RunConfig, args: Namespace):
    """Semi-supervised training over the unlabeled split."""
    result = semisup_loop(
        read_split(cfg, 'train'), read_split(cfg, 'val'),
        read_split(cfg, 'unlabeled'), lambda: fresh_model(cfg),
        cfg.train_config(), threshold=cfg.confidence,
        max_rounds=cfg.max_rounds, min_new=cfg.min_new,
        augment=cfg.augment, save_dir=cfg.out_dir
    )
    save_checkpoint(join(cfg.out_dir, 'model.ckpt'), result.model)

    if cfg.manifest is not None:
        manifest = pseudo_label_manifest(read_manifest(cfg.manifest),
                                         result.pseudo_labels)
        manifest.to_csv(join(cfg.out_dir, 'pseudo_manifest.csv'),
                        index=False)

    print(f'{len(result.rounds)} rounds, {len(result.pseudo_labels)} '
          f'pseudo-labels, train set {result.train_sizes[0]} -> '
          f'{result.train_sizes[-1]} patches')


def cmd_evaluate(cfg: RunConfig, args: Namespace):
    """Metrics, ROC and learned cuts of a checkpoint on one split."""
    require(cfg, 'checkpoint')
    report = evaluate(require_file(cfg.checkpoint),
                      read_split(cfg, args.split), threshold=cfg.threshold,
                      device=cfg.device, save_dir=cfg.out_dir)
    print(report.summary())


def cmd_gradcam(cfg: RunConfig, args: Namespace):
    """Grad-CAM heatmaps of a checkpoint on one split."""
    require(cfg, 'checkpoint')
    df = save_grad_cams(require_file(cfg.checkpoint),
                        read_split(cfg, args.split),
                        join(cfg.out_dir, 'gradcam'),
                        box_half_width=args.box_half_width)
    print(f'{len(df)} heatmaps, mean central mass {df["box_mass"].mean():.3f}')


def cmd_phantom(cfg: RunConfig, args: Namespace):
    """Synthetic dataset in the real input formats, plus its patch caches."""
    generate_dataset(cfg.n_benign, cfg.n_malignant, cfg.side, cfg.seed,
                     n_unlabeled=cfg.n_unlabeled, out_dir=cfg.out_dir,
                     num_workers=cfg.num_workers)

    manifest = join(cfg.out_dir, 'manifest.csv')
    patches = preprocess_dataset(
        read_ratings(join(cfg.out_dir, 'ratings.csv')),
        read_manifest(manifest), join(cfg.out_dir, 'volumes'), cfg.side,
        cfg.target_spacing, cfg.augment, cfg.num_workers
    )
    write_splits(patches, cfg.patches_dir or cfg.out_dir)


def _parse_ints(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(',') if v.strip()]
    except ValueError:
        raise UsageError(f'expected comma separated integers, got {text!r}')


def cmd_sweep(cfg: RunConfig, args: Namespace):
    """Train and evaluate every window configuration, one row each."""
    train_set = read_split(cfg, 'train')
    val_set = read_split(cfg, 'val')
    test_set = read_split(cfg, args.split)
    rows = []

    combos = product(_parse_ints(args.branch_list), ('constant', 'random'),
                     ('learnable', 'fixed'), (False, True))

    for branches, init, cuts, include_original in combos:
        run = load_config(overrides={
            **cfg.to_dict(), 'mode': 'lmlcc', 'branches': branches,
            'init': init, 'cuts': cuts, 'include_original': include_original,
            'fixed_cuts_hu': None
        })
        logger.info(f'Sweep: {branches} branches, {init}, {cuts}, '
                    f'original {include_original}')

        result = train(fresh_model(run), train_set, val_set,
                       run.train_config(), verbose=False)
        report = evaluate(result.model, test_set, threshold=run.threshold)
        row = report.to_frame().iloc[0].to_dict()
        rows.append({'branches': branches, 'init': init, 'cuts': cuts,
                     'include_original': include_original, **row})

    df = pd.DataFrame(rows)
    df.to_csv(join(cfg.out_dir, 'sweep.csv'), index=False)
    print(df[['branches', 'init', 'cuts', 'include_original', 'acc',
              'auc']].to_string(index=False))


def cmd_profile(cfg: RunConfig, args: Namespace):
    """Benign vs malignant HU histograms of one split."""
    df = intensity_profile(read_split(cfg, args.split), bins=args.bins)
    df.to_csv(join(cfg.out_dir, 'profile.csv'), index=False)


COMMANDS: Dict[str, Callable[[RunConfig, Namespace], None]] = {
    'label': cmd_label,
    'preprocess': cmd_preprocess,
    'train': cmd_train,
    'pseudolabel': cmd_pseudolabel,
    'evaluate': cmd_evaluate,
    'gradcam': cmd_gradcam,
    'phantom': cmd_phantom,
    'sweep': cmd_sweep,
    'profile': cmd_profile,
}


def _add(parser: ArgumentParser, flag: str, help: str, **kwargs):
    parser.add_argument(flag, default=SUPPRESS, help=help, **kwargs)


def parse_args(argv: Optional[Sequence[str]] = None) -> Namespace:
    common = ArgumentParser(add_help=False)
    common.add_argument('--config', type=str, default=None,
                        help='Flat YAML file with config keys.')
    common.add_argument('--log-level', type=str, default='INFO',
                        choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'],
                        help='Logging level.')
    _add(common, '--seed', 'Seed of every random choice (env LMLCC_SEED).')
    _add(common, '--out-dir', 'Directory to write outputs to.')
    _add(common, '--device', 'Torch device, cpu or cuda.')
    _add(common, '--num-workers', 'Threads for volume and phantom work.')

    data = ArgumentParser(add_help=False)
    _add(data, '--ratings', 'Nodule ratings CSV.')
    _add(data, '--manifest', 'Split manifest CSV.')
    _add(data, '--volumes-dir', 'Directory with <series_id>.mhd volumes.')
    _add(data, '--patches-dir', 'Directory with <split>.patches caches.')
    _add(data, '--side', 'Patch side in voxels.')
    _add(data, '--augment', 'Rotation augmentation of train patches.',
         choices=['true', 'false'])

    model = ArgumentParser(add_help=False)
    _add(model, '--mode', 'Model type.', choices=['backbone', 'lmlcc'])
    _add(model, '--scale', 'Backbone size.', choices=['full', 'desk'])
    _add(model, '--branches', 'Number of intensity branches.')
    _add(model, '--init', 'Cut initialisation.',
         choices=['constant', 'random'])
    _add(model, '--cuts', 'Learnable or fixed cuts.',
         choices=['learnable', 'fixed'])
    _add(model, '--include-original', 'Add the unwindowed input as a branch.',
         choices=['true', 'false'])
    _add(model, '--fixed-cuts-hu', 'Comma separated interior cuts in HU.')
    _add(model, '--tau', 'Window softness.')
    _add(model, '--epochs', 'Number of epochs to train to.')
    _add(model, '--batch-size', 'Batch size.')
    _add(model, '--lr', 'Initial learning rate.')
    _add(model, '--lr-patience', 'Plateau epochs before halving the lr.')
    _add(model, '--min-lr', 'Learning rate floor.')
    _add(model, '--early-stop-patience', 'Epochs without improvement before '
         'early stop.')

    evaluation = ArgumentParser(add_help=False)
    _add(evaluation, '--checkpoint', 'Model checkpoint file.')
    _add(evaluation, '--threshold', 'Probability threshold.')
    evaluation.add_argument('--split', type=str, default='test',
                            choices=list(SPLITS), help='Split to use.')

    parser = Parser(prog='lmlcc', description=__doc__.split('\n')[0])
    sub = parser.add_subparsers(dest='command', required=True,
                                parser_class=Parser)

    sub.add_parser('label', parents=[common, data],
                   help='Consensus labels and split manifest.')
    sub.add_parser('preprocess', parents=[common, data],
                   help='Extract patch caches.')
    sub.add_parser('train', parents=[common, data, model],
                   help='Train a model.')

    p = sub.add_parser('pseudolabel', parents=[common, data, model],
                       help='Semi-supervised pseudo-labeling loop.')
    _add(p, '--confidence', 'Confidence to accept a pseudo-label.')
    _add(p, '--max-rounds', 'Maximum number of rounds.')
    _add(p, '--min-new', 'Stop when a round accepts fewer nodules.')

    sub.add_parser('evaluate', parents=[common, data, evaluation],
                   help='Evaluate a checkpoint.')

    p = sub.add_parser('gradcam', parents=[common, data, evaluation],
                       help='Grad-CAM heatmaps.')
    p.add_argument('--box-half-width', type=int, default=4,
                   help='Half width of the central box in voxels.')

    p = sub.add_parser('phantom', parents=[common, data],
                       help='Generate a synthetic dataset.')
    _add(p, '--n-benign', 'Labeled benign phantoms.')
    _add(p, '--n-malignant', 'Labeled malignant phantoms.')
    _add(p, '--n-unlabeled', 'Phantoms with ambiguous ratings.')

    p = sub.add_parser('sweep', parents=[common, data, model, evaluation],
                       help='Train and evaluate window configurations.')
    p.add_argument('--branch-list', type=str, default='2,3,6,11',
                   help='Comma separated branch counts.')

    p = sub.add_parser('profile', parents=[common, data, evaluation],
                       help='Per-class HU histograms.')
    p.add_argument('--bins', type=int, default=50, help='Histogram bins.')

    return parser.parse_args(argv)


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main function."""
    args = parse_args(argv)

    logging.basicConfig(
        level=args.log_level,
        format='%(asctime)s %(levelname)s %(name)s: %(message)s'
    )

    try:
        overrides = {k: v for k, v in vars(args).items() if k in CONFIG_KEYS}
        cfg = load_config(args.config, overrides)

        create_dirs([cfg.out_dir])
        write_config(cfg, join(cfg.out_dir, 'resolved-config.yaml'))
        logger.info(f'Resolved config: {cfg.to_dict()}')

        with logging_redirect_tqdm():
            COMMANDS[args.command](cfg, args)
    except LmlccError as e:
        print(f'error: {e}', file=sys.stderr)
        return e.exit_code

    return 0


if __name__ == '__main__':
    sys.exit(main())
