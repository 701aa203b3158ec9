"""Synthetic CT nodule phantoms.

Benign phantoms are smooth ellipsoids with a narrow, smoothly varying HU
band. Malignant phantoms are spheres with radial spikes and a broad bimodal
HU mixture. Volumes are cubes in the target spacing with the nodule centred
on voxel (side // 2, side // 2, side // 2), so a patch of the same side cut
around the nodule centre covers the whole volume.

"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple
import logging
import math

import numpy as np
import pandas as pd
from scipy import ndimage
from tqdm import tqdm

from os.path import join

from .errors import ConfigError
from .ingest import CtVolume, NoduleRecord, Triple, voxel_to_world
from .ingest import write_mhd_volume, write_ratings
from .labeling import (
    MIN_SPLIT_SIZE, DatasetSplit, MalignancyLabel, label_records,
    split_by_nodule, split_manifest, write_manifest
)
from .preprocess import HU_MAX, HU_MIN, TARGET_SPACING, Patch, clip_normalize
from .utils import create_dirs

logger = logging.getLogger(__name__)

BENIGN = 'benign'
MALIGNANT = 'malignant'

BACKGROUND_HU = -1000.0
PARENCHYMA_SD = 20.0

# Spikes reach at most this multiple of the radius from the centre.
MAX_REACH = 1.6

BENIGN_RATINGS = [(1, 2, 2, 1), (1, 2, 3), (2, 1), (1, 2, 3, 4)]
MALIGNANT_RATINGS = [(4, 5, 4, 5), (5, 4, 3), (4, 5), (5, 4, 3, 2)]
AMBIGUOUS_RATINGS = [(3, 3, 4, 2), (3, 3), (2, 4), (3, 4, 2)]


@dataclass(frozen=True)
class PhantomSpec:
    """Parameters of one phantom.

    Attributes:
        kind: benign or malignant.
        side: Volume edge length in voxels.
        radius_mm: Nodule radius, defaults to 0.22 of the in-plane
            extent.
        spiculation: Number of radial spikes (0 for benign).
        core_hu_band: (lo, hi) HU range of the nodule interior.
        texture_noise_sd: Gaussian noise added inside the nodule, in HU.
        seed: Random seed, the phantom is a pure function of these fields.
        spacing: Voxel size in mm, (x, y, z).

    """
    kind: str
    side: int = 16
    radius_mm: Optional[float] = None
    spiculation: int = 0
    core_hu_band: Tuple[float, float] = (-100.0, 60.0)
    texture_noise_sd: float = 15.0
    seed: int = 0
    spacing: Triple = TARGET_SPACING

    @classmethod
    def benign(cls, seed: int = 0, side: int = 16, **kwargs) -> 'PhantomSpec':
        return cls(BENIGN, side, seed=seed, **kwargs)

    @classmethod
    def malignant(cls, seed: int = 0, side: int = 16, spiculation: int = 12,
                  **kwargs) -> 'PhantomSpec':
        kwargs.setdefault('core_hu_band', (-300.0, 350.0))
        kwargs.setdefault('texture_noise_sd', 60.0)

        return cls(MALIGNANT, side, spiculation=spiculation, seed=seed,
                   **kwargs)

    def __post_init__(self):
        if self.kind not in (BENIGN, MALIGNANT):
            raise ConfigError(f'phantom kind must be benign or malignant, '
                              f'got {self.kind}')
        if self.radius_mm is None:
            object.__setattr__(self, 'radius_mm',
                               0.22 * self.side * min(self.spacing))

        lo, hi = self.core_hu_band

        if not HU_MIN <= lo < hi <= HU_MAX:
            raise ConfigError(f'HU band must lie within [{HU_MIN}, {HU_MAX}], '
                              f'got {self.core_hu_band}')
        if self.radius_mm <= 0 or self.spiculation < 0:
            raise ConfigError('radius must be > 0 and spiculation >= 0')

        for s in self.spacing:
            room = (self.side // 2 - 1) * s

            if self.reach_mm > room:
                raise ConfigError(
                    f'nodule reaching {self.reach_mm:.2f} mm does not fit a '
                    f'{self.side}^3 patch with spacing {self.spacing}'
                )

    @property
    def label(self) -> int:
        return int(self.kind == MALIGNANT)

    @property
    def reach_mm(self) -> float:
        """Largest distance of a nodule voxel from the centre."""
        return self.radius_mm * (MAX_REACH if self.spiculation else 1.0)

    def bounding_box(self) -> Tuple[Tuple[int, ...], Tuple[int, ...]]:
        """Voxel box [lo, hi) in (z, y, x) order that contains the nodule."""
        c = self.side // 2
        half = [math.ceil(self.reach_mm / s) for s in self.spacing[::-1]]

        return (tuple(c - h for h in half),
                tuple(min(c + h + 1, self.side) for h in half))


@dataclass(frozen=True, eq=False)
class Phantom:
    """A generated phantom: HU volume, nodule mask and label."""
    spec: PhantomSpec
    volume: CtVolume
    mask: np.ndarray = field(repr=False)

    @property
    def label(self) -> int:
        return self.spec.label


def _offsets_mm(spec: PhantomSpec) -> np.ndarray:
    """Offset of every voxel from the nodule centre, shape (3, z, y, x) in
    (z, y, x) order."""
    c = spec.side // 2
    axes = [(np.arange(spec.side) - c) * s for s in spec.spacing[::-1]]

    return np.stack(np.meshgrid(*axes, indexing='ij'))


def _benign_mask(spec: PhantomSpec, rng: np.random.Generator,
                 offsets: np.ndarray) -> np.ndarray:
    semi_axes = spec.radius_mm * rng.uniform(0.8, 1.0, 3)

    return ((offsets / semi_axes[:, None, None, None])**2).sum(0) <= 1


def _spiculated_mask(spec: PhantomSpec, rng: np.random.Generator,
                     offsets: np.ndarray) -> np.ndarray:
    r = spec.radius_mm
    mask = (offsets**2).sum(0) <= r**2

    for _ in range(spec.spiculation):
        u = rng.normal(size=3)
        u /= np.linalg.norm(u)
        length = r * rng.uniform(1.3, MAX_REACH)
        width = r * rng.uniform(0.15, 0.3)

        # Tapered cylinder along u from the centre out to length.
        t = np.tensordot(u, offsets, axes=1)
        perp = np.sqrt(np.maximum((offsets**2).sum(0) - t**2, 0))
        mask |= (t >= 0) & (t <= length) & (perp <= width * (1 - t / length))

    return mask


def _benign_texture(spec: PhantomSpec, rng: np.random.Generator
                    ) -> np.ndarray:
    lo, hi = spec.core_hu_band
    field_ = ndimage.gaussian_filter(rng.normal(size=(spec.side,) * 3),
                                     sigma=2)
    field_ = (field_ - field_.min()) / max(np.ptp(field_), 1e-12)

    return lo + (hi - lo) * field_


def _malignant_texture(spec: PhantomSpec, rng: np.random.Generator
                       ) -> np.ndarray:
    lo, hi = spec.core_hu_band
    shape = (spec.side,) * 3
    centers = np.where(rng.random(shape) < 0.5, lo + 0.25 * (hi - lo),
                       lo + 0.75 * (hi - lo))

    return np.clip(centers + rng.normal(0, (hi - lo) / 8, shape), lo, hi)


def generate_phantom(spec: PhantomSpec, series_id: Optional[str] = None
                     ) -> Phantom:
    """Render a phantom volume in whole HU values, clipped to [-1000, 500]."""
    rng = np.random.default_rng(spec.seed)
    shape = (spec.side,) * 3
    offsets = _offsets_mm(spec)

    voxels = BACKGROUND_HU + rng.normal(0, PARENCHYMA_SD, shape)

    if spec.kind == BENIGN:
        mask = _benign_mask(spec, rng, offsets)
        core = _benign_texture(spec, rng)
    else:
        mask = _spiculated_mask(spec, rng, offsets)
        core = _malignant_texture(spec, rng)

    core = core + rng.normal(0, spec.texture_noise_sd, shape)
    voxels[mask] = core[mask]
    voxels = np.rint(np.clip(voxels, HU_MIN, HU_MAX)).astype(np.int16)

    volume = CtVolume(
        series_id or f'phantom-{spec.kind}-{spec.seed}', shape,
        tuple(spec.spacing), (0.0, 0.0, 0.0), voxels
    )

    return Phantom(spec, volume, mask)


def nodule_center(volume: CtVolume) -> Triple:
    """World position of the phantom nodule centre."""
    return voxel_to_world(volume, [d // 2 for d in volume.dims])


@dataclass
class PhantomDataset:
    """Generated phantoms in the formats of the real pipeline.

    Attributes:
        records: One rating record per phantom.
        manifest: Split manifest (nodule_id, split, label); ambiguous
            phantoms form the unlabeled split.
        patches: Normalised patches keyed by nodule_id, label None for
            ambiguous phantoms.
        truth: Hidden class of every phantom, keyed by nodule_id.

    """
    records: List[NoduleRecord]
    manifest: pd.DataFrame
    patches: Dict[str, Patch]
    truth: Dict[str, int]

    def split(self, name: str) -> List[Patch]:
        """Patches of one split, in manifest order."""
        ids = self.manifest.loc[self.manifest['split'] == name, 'nodule_id']

        return [self.patches[i] for i in ids]


def _split(labels: Dict[str, MalignancyLabel], seed: int) -> DatasetSplit:
    """Stratified split, or everything labeled in train when too few."""
    labeled = frozenset(k for k, v in labels.items()
                        if v is not MalignancyLabel.AMBIGUOUS)

    if len(labeled) >= MIN_SPLIT_SIZE:
        return split_by_nodule(labels, seed)

    logger.warning(f'{len(labeled)} labeled phantoms are too few to split, '
                   'all go to train.')

    return DatasetSplit(labeled, frozenset(), frozenset(),
                        frozenset(labels) - labeled)


def generate_dataset(n_benign: int, n_malignant: int, side: int = 16,
                     seed: int = 0, n_unlabeled: int = 0,
                     out_dir: Optional[str] = None, num_workers: int = 1,
                     verbose: bool = True) -> PhantomDataset:
    """Generate a labeled phantom set plus an optional hidden-label pool.

    Labeled phantoms get rating tuples that the consensus table labels
    unambiguously; pool phantoms (half benign, half malignant) get ambiguous
    ratings, so they land in the unlabeled split. With fewer than five
    labeled phantoms no split is drawn and all of them go to train.

    Args:
        n_benign: Number of labeled benign phantoms.
        n_malignant: Number of labeled malignant phantoms.
        side: Patch / volume side in voxels.
        seed: Master seed; phantom i uses a seed derived from (seed, i).
        n_unlabeled: Number of phantoms with ambiguous ratings.
        out_dir: When given, receives volumes/<series_id>.mhd + .raw,
            ratings.csv, manifest.csv and truth.csv.
        num_workers: Threads rendering phantoms.
        verbose: Show a progress bar.

    """
    if min(n_benign, n_malignant, n_unlabeled) < 0:
        raise ConfigError('phantom counts must be >= 0')

    rng = np.random.default_rng(seed)
    n_pool_malignant = n_unlabeled // 2
    kinds = ([(BENIGN, False)] * n_benign + [(MALIGNANT, False)] * n_malignant
             + [(MALIGNANT, True)] * n_pool_malignant
             + [(BENIGN, True)] * (n_unlabeled - n_pool_malignant))
    kinds = [kinds[i] for i in rng.permutation(len(kinds))]
    seeds = [int(s.generate_state(1)[0])
             for s in np.random.SeedSequence(seed).spawn(len(kinds))]

    def work(i):
        kind, _ = kinds[i]
        make = PhantomSpec.benign if kind == BENIGN else PhantomSpec.malignant

        return generate_phantom(make(seed=seeds[i], side=side),
                                series_id=f'phantom{i:05d}')

    with ThreadPoolExecutor(max_workers=max(1, num_workers)) as pool:
        phantoms = list(tqdm(pool.map(work, range(len(kinds))),
                             total=len(kinds), desc='Generating phantoms',
                             disable=not verbose))

    records, patches, truth = [], {}, {}

    for i, (phantom, (kind, hidden)) in enumerate(zip(phantoms, kinds)):
        nodule_id = f'n{i:05d}'
        options = (AMBIGUOUS_RATINGS if hidden else
                   MALIGNANT_RATINGS if kind == MALIGNANT else BENIGN_RATINGS)

        records.append(NoduleRecord(
            series_id=phantom.volume.series_id, nodule_id=nodule_id,
            center_world=nodule_center(phantom.volume),
            diameter_mm=2 * phantom.spec.radius_mm,
            ratings=options[rng.integers(len(options))]
        ))
        patches[nodule_id] = Patch(
            nodule_id, side, clip_normalize(phantom.volume).voxels,
            None if hidden else phantom.label
        )
        truth[nodule_id] = phantom.label

    labels = label_records(records)
    manifest = split_manifest(_split(labels, seed), labels)

    if out_dir is not None:
        volumes_dir = join(out_dir, 'volumes')
        create_dirs([volumes_dir])

        for phantom in phantoms:
            write_mhd_volume(phantom.volume, join(
                volumes_dir, f'{phantom.volume.series_id}.mhd'))

        write_ratings(records, join(out_dir, 'ratings.csv'))
        write_manifest(manifest, join(out_dir, 'manifest.csv'))
        pd.DataFrame(list(truth.items()), columns=['nodule_id', 'label']) \
            .to_csv(join(out_dir, 'truth.csv'), index=False)

        logger.info(f'Wrote {len(phantoms)} phantoms to {out_dir}.')

    return PhantomDataset(records, manifest, patches, truth)

