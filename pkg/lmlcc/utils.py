"""Utility functions."""
from typing import List
import random

import numpy as np
import torch

from os import makedirs
from os.path import basename, isfile, splitext

from .errors import DataError


def create_dirs(dirs: List[str], exist_ok: bool = True):
    """Create multiple directories.

    Args:
        dirs: List of directories.
        exist_ok: If False raise error if directory already exists.

    """
    for d in dirs:
        makedirs(d, exist_ok=exist_ok)


def get_filename(fp: str, prune_ext: bool = True) -> str:
    """Get the filename of a filepath.

    Args:
        fp: Filepath.
        prune_ext: Remove extension.

    Returns:
        Filename.

    """
    fn = basename(fp)

    if prune_ext:
        fn = splitext(fn)[0]

    return fn


def require_file(fp: str) -> str:
    """Return the filepath if it exists, otherwise raise a DataError naming it."""
    if not isfile(fp):
        raise DataError(f'file not found: {fp}')

    return fp


def seed_everything(seed: int):
    """Seed python, numpy and torch random number generators."""
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
