"""Read CT volumes (MetaImage header + raw data) and radiologist rating CSVs.

Voxel arrays are stored z-major, i.e. ``voxels[z, y, x]``, which is the
natural reshape of the x-fastest raw layout. Geometry tuples (dims, spacing,
origin) are always given in (x, y, z) order.

"""
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple
import logging

import numpy as np
import pandas as pd

from os.path import dirname, getsize, isabs, join

from .errors import (
    DuplicateError, ParseError, SizeMismatchError, ValidationError
)
from .utils import get_filename, require_file

logger = logging.getLogger(__name__)

Triple = Tuple[float, float, float]

# MetaImage element types and their little-endian numpy dtypes.
ELEMENT_TYPES = {
    'MET_UCHAR': 'u1',
    'MET_CHAR': 'i1',
    'MET_USHORT': '<u2',
    'MET_SHORT': '<i2',
    'MET_UINT': '<u4',
    'MET_INT': '<i4',
    'MET_FLOAT': '<f4',
    'MET_DOUBLE': '<f8',
}

REQUIRED_KEYS = ('DimSize', 'ElementSpacing', 'ElementType',
                 'ElementDataFile')

RATINGS_COLUMNS = ('series_id', 'nodule_id', 'coordX', 'coordY', 'coordZ',
                   'diameter_mm', 'ratings')


@dataclass(frozen=True, eq=False)
class CtVolume:
    """A CT scan in Hounsfield Units.

    Attributes:
        series_id: Scan identifier.
        dims: Voxel counts (nx, ny, nz).
        spacing: Voxel size in mm (sx, sy, sz).
        origin: World position of voxel (0, 0, 0) in mm.
        voxels: Array of shape (nz, ny, nx).

    """
    series_id: str
    dims: Tuple[int, int, int]
    spacing: Triple
    origin: Triple
    voxels: np.ndarray = field(repr=False)

    def __post_init__(self):
        if len(self.dims) != 3 or any(d < 1 for d in self.dims):
            raise ValidationError(f'dims must be three values >= 1, got '
                                  f'{self.dims}')
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValidationError(f'spacing must be three values > 0, got '
                                  f'{self.spacing}')

        nx, ny, nz = self.dims

        if self.voxels.shape != (nz, ny, nx):
            raise SizeMismatchError(
                f'voxel array shape {self.voxels.shape} does not match dims '
                f'{self.dims}'
            )

    def with_voxels(self, voxels: np.ndarray, spacing: Triple = None
                    ) -> 'CtVolume':
        """Copy of the volume with new voxel values (and optionally spacing)."""
        nz, ny, nx = voxels.shape

        return type(self)(self.series_id, (nx, ny, nz),
                          tuple(spacing or self.spacing), self.origin, voxels)


@dataclass(frozen=True)
class NoduleRecord:
    """One annotated nodule and the malignancy ratings it received."""
    series_id: str
    nodule_id: str
    center_world: Triple
    diameter_mm: float
    ratings: Tuple[int, ...] = ()


def _parse_header(header_path: str) -> Dict[str, str]:
    header = {}

    with open(header_path, 'r') as fh:
        for line in fh:
            line = line.strip()

            if not line or line.startswith('#'):
                continue

            if '=' not in line:
                raise ParseError(line, f'malformed header line: {line!r}')

            key, value = line.split('=', 1)
            header[key.strip()] = value.strip()

    return header


def _parse_numbers(header: Dict[str, str], key: str, cast=float,
                   n: int = 3) -> tuple:
    try:
        values = tuple(cast(v) for v in header[key].split())
    except KeyError:
        raise ParseError(key)
    except ValueError:
        raise ParseError(key, f'malformed value for {key}: {header[key]!r}')

    if len(values) != n:
        raise ParseError(key, f'{key} must have {n} values, got '
                              f'{len(values)}')

    return values


def read_mhd_volume(header_path: str) -> CtVolume:
    """Read a MetaImage header and its raw data file.

    Only uncompressed, single-file data is supported. The series id is the
    header filename without extension.

    Args:
        header_path: Filepath to the .mhd header.

    Returns:
        The volume.

    Raises:
        ParseError: A required key is missing or malformed.
        SizeMismatchError: The raw file length does not match DimSize.

    """
    require_file(header_path)
    header = _parse_header(header_path)

    for key in REQUIRED_KEYS:
        if key not in header:
            raise ParseError(key)

    dims = _parse_numbers(header, 'DimSize', cast=int)
    spacing = _parse_numbers(header, 'ElementSpacing')

    if 'Offset' in header:
        origin = _parse_numbers(header, 'Offset')
    else:
        origin = (0.0, 0.0, 0.0)

    element_type = header['ElementType']

    if element_type not in ELEMENT_TYPES:
        raise ParseError('ElementType',
                         f'unsupported ElementType: {element_type}')

    if header.get('CompressedData', 'False').lower() == 'true':
        raise ParseError('CompressedData', 'compressed data is not supported')

    data_file = header['ElementDataFile']

    if data_file.upper() in ('LOCAL', 'LIST'):
        raise ParseError('ElementDataFile',
                         f'unsupported ElementDataFile: {data_file}')

    if not isabs(data_file):
        data_file = join(dirname(header_path), data_file)

    require_file(data_file)

    dtype = np.dtype(ELEMENT_TYPES[element_type])

    if header.get('BinaryDataByteOrderMSB', 'False').lower() == 'true':
        dtype = dtype.newbyteorder('>')

    nx, ny, nz = dims
    expected = nx * ny * nz * dtype.itemsize
    actual = getsize(data_file)

    if actual != expected:
        raise SizeMismatchError(
            f'{data_file}: expected {expected} bytes for DimSize {dims} '
            f'and {element_type}, found {actual}'
        )

    voxels = np.fromfile(data_file, dtype=dtype).reshape(nz, ny, nx)

    logger.debug(f'Read {header_path}: dims {dims}, spacing {spacing}.')

    return CtVolume(get_filename(header_path), dims, spacing, origin, voxels)


def write_mhd_volume(volume: CtVolume, header_path: str,
                     element_type: str = 'MET_SHORT'):
    """Write a volume as a MetaImage header plus raw data file.

    The raw file sits next to the header with the same name and a .raw
    extension. Values are rounded when writing an integer element type.

    """
    if element_type not in ELEMENT_TYPES:
        raise ValueError(f'unsupported ElementType: {element_type}')

    dtype = np.dtype(ELEMENT_TYPES[element_type])
    raw_name = get_filename(header_path) + '.raw'
    voxels = volume.voxels

    if dtype.kind in 'iu':
        voxels = np.rint(voxels)

    voxels.astype(dtype).tofile(join(dirname(header_path), raw_name))

    fmt = lambda values: ' '.join(str(v) for v in values)

    lines = [
        'ObjectType = Image',
        'NDims = 3',
        'BinaryData = True',
        'BinaryDataByteOrderMSB = False',
        'CompressedData = False',
        f'Offset = {fmt(volume.origin)}',
        f'ElementSpacing = {fmt(volume.spacing)}',
        f'DimSize = {fmt(volume.dims)}',
        f'ElementType = {element_type}',
        f'ElementDataFile = {raw_name}',
    ]

    with open(header_path, 'w') as fh:
        fh.write('\n'.join(lines) + '\n')


def _parse_ratings(value: str, row: int) -> Tuple[int, ...]:
    value = value.strip()

    if not value:
        return ()

    try:
        ratings = tuple(int(r) for r in value.split('|'))
    except ValueError:
        raise ValidationError(f'malformed ratings {value!r}', row=row)

    for r in ratings:
        if not 1 <= r <= 5:
            raise ValidationError(f'rating {r} outside 1..5', row=row)

    if len(ratings) > 4:
        raise ValidationError(f'at most 4 ratings allowed, got '
                              f'{len(ratings)}', row=row)

    return ratings


def read_ratings(csv_path: str) -> List[NoduleRecord]:
    """Read the nodule rating CSV.

    Columns: series_id, nodule_id, coordX, coordY, coordZ, diameter_mm,
    ratings (pipe separated, may be empty).

    Raises:
        ParseError: A required column is missing.
        ValidationError: A value is out of range, with its data row number.
        DuplicateError: A nodule_id appears twice.

    """
    require_file(csv_path)
    df = pd.read_csv(csv_path, dtype=str, keep_default_na=False)

    for col in RATINGS_COLUMNS:
        if col not in df:
            raise ParseError(col, f'{csv_path}: missing column {col}')

    records = []
    seen = set()

    for i, r in enumerate(df.itertuples(index=False), start=1):
        if r.nodule_id in seen:
            raise DuplicateError(f'row {i}: duplicate nodule_id '
                                 f'{r.nodule_id}')

        seen.add(r.nodule_id)

        try:
            center = (float(r.coordX), float(r.coordY), float(r.coordZ))
            diameter = float(r.diameter_mm)
        except ValueError:
            raise ValidationError('malformed coordinate or diameter', row=i)

        if diameter <= 0:
            raise ValidationError(f'diameter_mm must be > 0, got {diameter}',
                                  row=i)

        records.append(NoduleRecord(
            series_id=r.series_id,
            nodule_id=r.nodule_id,
            center_world=center,
            diameter_mm=diameter,
            ratings=_parse_ratings(r.ratings, i)
        ))

    logger.info(f'Read {len(records)} nodules from {csv_path}.')

    return records


def write_ratings(records: Sequence[NoduleRecord], csv_path: str):
    """Write nodule records in the format read by read_ratings."""
    rows = [{
        'series_id': r.series_id,
        'nodule_id': r.nodule_id,
        'coordX': r.center_world[0],
        'coordY': r.center_world[1],
        'coordZ': r.center_world[2],
        'diameter_mm': r.diameter_mm,
        'ratings': '|'.join(str(v) for v in r.ratings)
    } for r in records]

    pd.DataFrame(rows, columns=list(RATINGS_COLUMNS)).to_csv(csv_path,
                                                            index=False)


def world_to_voxel(v: CtVolume, p: Sequence[float]) -> Triple:
    """Continuous (x, y, z) voxel coordinate of a world point in mm.

    The result may lie outside the grid, callers check bounds.

    """
    return tuple((pi - oi) / si for pi, oi, si in zip(p, v.origin, v.spacing))


def voxel_to_world(v: CtVolume, idx: Sequence[float]) -> Triple:
    """World position in mm of a continuous (x, y, z) voxel coordinate."""
    return tuple(oi + ii * si for ii, oi, si in zip(idx, v.origin, v.spacing))


def load_volumes(records: Sequence[NoduleRecord], volumes_dir: str
                 ) -> Dict[str, CtVolume]:
    """Read every series referenced by the records once, keyed by series_id."""
    volumes = {}

    for series_id in dict.fromkeys(r.series_id for r in records):
        volumes[series_id] = read_mhd_volume(
            join(volumes_dir, f'{series_id}.mhd')
        )

    return volumes
