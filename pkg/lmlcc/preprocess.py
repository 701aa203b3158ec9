"""HU clipping, resampling, patch extraction and rotation augmentation."""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence
import logging
import struct

import numpy as np
import pandas as pd
from scipy import ndimage
from tqdm import tqdm

from .errors import DataError, OutOfBoundsError, ShapeError, ValidationError
from .ingest import CtVolume, NoduleRecord, Triple, read_mhd_volume, world_to_voxel
from .utils import require_file

from os.path import join

logger = logging.getLogger(__name__)

HU_MIN = -1000.0
HU_MAX = 500.0

# Spacing in mm the volumes are resampled to before patch extraction.
TARGET_SPACING = (0.7, 0.7, 1.0)

PATCH_SIDES = (16, 32, 48, 64)

ROTATION_TAGS = tuple(f'rot{a:03d}' for a in range(0, 360, 45))


@dataclass(frozen=True, eq=False)
class NormalizedVolume(CtVolume):
    """A volume whose voxels were mapped from HU into [0, 1]."""

    def __post_init__(self):
        super().__post_init__()

        if self.voxels.size and (self.voxels.min() < 0
                                 or self.voxels.max() > 1):
            raise ValidationError('normalized voxels must lie in [0, 1]')


@dataclass(frozen=True, eq=False)
class Patch:
    """Cubic sub-volume around a nodule, indexed [z, y, x], values in [0, 1].

    Attributes:
        nodule_id: Nodule the patch was cut around.
        side: Edge length in voxels.
        voxels: float32 array of shape (side, side, side).
        label: 1 malignant, 0 benign, None when unknown.
        augmentation_tag: 'rot000' for the unrotated patch, 'rotNNN' for a
            rotation of NNN degrees about the axial axis.

    """
    nodule_id: str
    side: int
    voxels: np.ndarray = field(repr=False)
    label: Optional[int] = None
    augmentation_tag: str = 'rot000'

    def __post_init__(self):
        if self.voxels.shape != (self.side,) * 3:
            raise ShapeError(f'patch {self.nodule_id} must be cubic with side '
                             f'{self.side}, got {self.voxels.shape}')

    def relabel(self, label: Optional[int]) -> 'Patch':
        return Patch(self.nodule_id, self.side, self.voxels, label,
                     self.augmentation_tag)


def hu_to_unit(hu):
    """Linear map from the [-1000, 500] HU window to [0, 1], clamped."""
    return (np.clip(hu, HU_MIN, HU_MAX) - HU_MIN) / (HU_MAX - HU_MIN)


def unit_to_hu(x):
    """Inverse of hu_to_unit inside the window."""
    return np.asarray(x) * (HU_MAX - HU_MIN) + HU_MIN


def clip_normalize(v: CtVolume) -> NormalizedVolume:
    """Clamp HU to [-1000, 500] and rescale linearly to [0, 1]."""
    voxels = hu_to_unit(v.voxels.astype(np.float64)).astype(np.float32)

    return NormalizedVolume(v.series_id, v.dims, v.spacing, v.origin, voxels)


def resample_trilinear(v: NormalizedVolume,
                       target_spacing: Triple = TARGET_SPACING
                       ) -> NormalizedVolume:
    """Resample a volume to a new voxel spacing by trilinear interpolation.

    Output voxel centres are mapped into the source grid. Samples within half
    a voxel of the source grid take the nearest edge value, samples farther
    out take 0 (air).

    """
    if len(target_spacing) != 3 or any(t <= 0 for t in target_spacing):
        raise ValidationError(f'target spacing must be three values > 0, got '
                              f'{target_spacing}')

    # Per axis in (z, y, x) order to match the voxel array.
    in_dims = v.dims[::-1]
    scale = [t / s for t, s in zip(target_spacing[::-1], v.spacing[::-1])]
    out_dims = [max(1, int(round(n / f))) for n, f in zip(in_dims, scale)]

    axes = []
    valid = []

    for n_in, n_out, f in zip(in_dims, out_dims, scale):
        c = (np.arange(n_out) + 0.5) * f - 0.5
        valid.append((c >= -0.5) & (c <= n_in - 0.5))
        axes.append(np.clip(c, 0, n_in - 1))

    coords = np.meshgrid(*axes, indexing='ij')
    out = ndimage.map_coordinates(v.voxels.astype(np.float64), coords,
                                  order=1, mode='nearest')

    mask = (valid[0][:, None, None] & valid[1][None, :, None]
            & valid[2][None, None, :])
    out[~mask] = 0.0

    return NormalizedVolume(v.series_id, tuple(out_dims[::-1]),
                            tuple(target_spacing), v.origin,
                            out.astype(np.float32))


def extract_patch(v: NormalizedVolume, center_world: Sequence[float],
                  side: int, nodule_id: str = '', label: Optional[int] = None
                  ) -> Patch:
    """Cut a cube of side voxels centred on the nearest voxel to a world point.

    Regions outside the volume are padded with 0.

    Raises:
        OutOfBoundsError: The cube does not overlap the volume.

    """
    if side < 1:
        raise ValidationError(f'patch side must be >= 1, got {side}')

    center = [int(np.floor(c + 0.5)) for c in world_to_voxel(v, center_world)]
    out = np.zeros((side,) * 3, dtype=np.float32)
    src, dst = [], []

    # Axis order of the voxel array is (z, y, x).
    for c, n in zip(center[::-1], v.voxels.shape):
        lo = c - side // 2
        a, b = max(lo, 0), min(lo + side, n)

        if a >= b:
            raise OutOfBoundsError(
                f'patch of side {side} around {tuple(center_world)} lies '
                f'outside the volume {v.series_id}'
            )

        src.append(slice(a, b))
        dst.append(slice(a - lo, b - lo))

    out[tuple(dst)] = v.voxels[tuple(src)]

    return Patch(nodule_id, side, out, label)


def rotate_augment(p: Patch) -> List[Patch]:
    """Original patch plus its 7 rotations in 45 degree steps about z.

    Right angles are exact index permutations, the 45 degree family uses
    bilinear in-plane interpolation with zero padding.

    """
    r45 = ndimage.rotate(p.voxels, 45, axes=(1, 2), reshape=False, order=1,
                         mode='constant', cval=0.0, prefilter=False)
    r45 = np.clip(r45, 0, 1).astype(np.float32)

    patches = []

    for k, tag in enumerate(ROTATION_TAGS):
        base = p.voxels if k % 2 == 0 else r45
        voxels = np.ascontiguousarray(np.rot90(base, k // 2, axes=(1, 2)))
        patches.append(Patch(p.nodule_id, p.side, voxels, p.label, tag))

    return patches


def preprocess_dataset(records: Sequence[NoduleRecord], manifest: pd.DataFrame,
                       volumes_dir: str, side: int,
                       target_spacing: Triple = TARGET_SPACING,
                       augment: bool = True, num_workers: int = 1,
                       verbose: bool = True) -> Dict[str, List[Patch]]:
    """Turn annotated scans into patches grouped by split.

    Each series is read once. Patches follow manifest order, rotations are
    added to the train split only when augment is set.

    Args:
        records: Nodule records with world centres.
        manifest: Split manifest (nodule_id, split, label).
        volumes_dir: Directory with <series_id>.mhd files.
        side: Patch edge length in voxels.
        target_spacing: Spacing to resample to before cutting patches.
        augment: Add the 7 rotations of every train patch.
        num_workers: Threads reading and resampling series.
        verbose: Show a progress bar.

    Returns:
        Patches keyed by split name.

    """
    by_id = {r.nodule_id: r for r in records}
    missing = set(manifest['nodule_id']) - set(by_id)

    if missing:
        raise DataError(f'manifest nodules without ratings record: '
                        f'{sorted(missing)[:5]}')

    series = {}

    for nodule_id in manifest['nodule_id']:
        series.setdefault(by_id[nodule_id].series_id, []).append(nodule_id)

    def work(series_id):
        fp = require_file(join(volumes_dir, f'{series_id}.mhd'))
        v = resample_trilinear(clip_normalize(read_mhd_volume(fp)),
                               target_spacing)

        return {
            nodule_id: extract_patch(v, by_id[nodule_id].center_world, side,
                                     nodule_id=nodule_id)
            for nodule_id in series[series_id]
        }

    extracted = {}

    with ThreadPoolExecutor(max_workers=max(1, num_workers)) as pool:
        for result in tqdm(pool.map(work, series), total=len(series),
                           desc='Extracting patches', disable=not verbose):
            extracted.update(result)

    patches = {}

    for r in manifest.itertuples(index=False):
        label = None if pd.isna(r.label) else int(r.label)
        p = extracted[r.nodule_id].relabel(label)

        if augment and r.split == 'train':
            patches.setdefault(r.split, []).extend(rotate_augment(p))
        else:
            patches.setdefault(r.split, []).append(p)

    for name, group in patches.items():
        logger.info(f'{name}: {len(group)} patches.')

    return patches


def write_patch_cache(patches: Sequence[Patch], path: str):
    """Write patches as binary records plus a CSV index next to them.

    Record layout: uint16 id length, utf-8 nodule_id, uint16 side, uint16 tag
    length, utf-8 augmentation_tag, int8 label (-1 unknown), then side**3
    little-endian float32 values in [z, y, x] order. The index (path + .csv)
    lists nodule_id, side, augmentation_tag, label and byte offset.

    """
    rows = []

    with open(path, 'wb') as fh:
        for p in patches:
            rows.append({
                'nodule_id': p.nodule_id, 'side': p.side,
                'augmentation_tag': p.augmentation_tag,
                'label': '' if p.label is None else p.label,
                'offset': fh.tell()
            })

            nid = p.nodule_id.encode('utf-8')
            tag = p.augmentation_tag.encode('utf-8')
            label = -1 if p.label is None else p.label

            fh.write(struct.pack('<H', len(nid)) + nid)
            fh.write(struct.pack('<H', p.side))
            fh.write(struct.pack('<H', len(tag)) + tag)
            fh.write(struct.pack('<b', label))
            fh.write(p.voxels.astype('<f4').tobytes())

    pd.DataFrame(rows, columns=['nodule_id', 'side', 'augmentation_tag',
                                'label', 'offset']).to_csv(path + '.csv',
                                                           index=False)


def read_patch_cache(path: str) -> List[Patch]:
    """Read every record of a patch cache file."""
    require_file(path)
    patches = []

    with open(path, 'rb') as fh:
        data = fh.read()

    pos = 0

    def take(n):
        nonlocal pos
        chunk = data[pos:pos + n]

        if len(chunk) != n:
            raise DataError(f'{path}: truncated patch record at byte {pos}')

        pos += n
        return chunk

    while pos < len(data):
        (n,) = struct.unpack('<H', take(2))
        nodule_id = take(n).decode('utf-8')
        (side,) = struct.unpack('<H', take(2))
        (n,) = struct.unpack('<H', take(2))
        tag = take(n).decode('utf-8')
        (label,) = struct.unpack('<b', take(1))
        voxels = np.frombuffer(take(4 * side**3), dtype='<f4')

        patches.append(Patch(
            nodule_id, side, voxels.reshape((side,) * 3).astype(np.float32),
            None if label < 0 else int(label), tag
        ))

    return patches


def intensity_profile(patches: Sequence[Patch], bins: int = 50,
                      floor_hu: float = -900.0) -> pd.DataFrame:
    """Per-class HU histogram of patch voxels above floor_hu.

    Densities are normalised per class, so benign and malignant intensity
    distributions can be compared directly.

    """
    edges = np.linspace(floor_hu, HU_MAX, bins + 1)
    df = pd.DataFrame({'hu_lo': edges[:-1], 'hu_hi': edges[1:]})

    for label, name in ((0, 'benign'), (1, 'malignant')):
        group = [p for p in patches if p.label == label]

        if not group:
            df[name] = 0.0
            continue

        hu = unit_to_hu(np.concatenate([p.voxels.ravel() for p in group]))
        counts, _ = np.histogram(hu[hu > floor_hu], bins=edges)
        df[name] = counts / max(counts.sum(), 1)

    return df
