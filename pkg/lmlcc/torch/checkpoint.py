"""Versioned binary checkpoints.

Layout (little-endian):

    b'LMLCCKPT'                magic
    uint32                     format version
    uint32 + bytes             config as sorted-key JSON
    32 bytes                   sha256 digest of the config bytes
    uint32                     tensor count
    per tensor: uint16 + name, uint8 ndim, ndim x uint32 shape,
                prod(shape) float32 values

Model tensors use their state_dict names. Adam moments are stored as
adam.exp_avg.<param>, adam.exp_avg_sq.<param> and adam.step.<param>; the Adam
hyper-parameters live in the config under "adam".

"""
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple
import hashlib
import json
import logging
import struct

import numpy as np
import torch
from torch import Tensor

from ..errors import CheckpointError, ShapeError
from ..utils import require_file
from .models import Model, build_model

logger = logging.getLogger(__name__)

MAGIC = b'LMLCCKPT'
VERSION = 1
ADAM_KEYS = ('exp_avg', 'exp_avg_sq', 'step')


@dataclass
class Checkpoint:
    """Decoded checkpoint contents.

    Attributes:
        config: Model config dictionary (see ``config_dict``) plus optional
            "adam" hyper-parameters and "meta" entries.
        tensors: Every stored tensor by name, float32.

    """
    config: dict
    tensors: Dict[str, Tensor] = field(default_factory=dict)

    @property
    def meta(self) -> dict:
        return self.config.get('meta', {})

    def model_state(self) -> Dict[str, Tensor]:
        return {k: v for k, v in self.tensors.items()
                if not k.startswith('adam.')}


def _adam_tensors(model: Model, optimizer: torch.optim.Adam
                  ) -> Tuple[dict, Dict[str, Tensor]]:
    names = {id(p): n for n, p in model.named_parameters()}
    group = optimizer.param_groups[0]
    hyper = {'lr': group['lr'], 'betas': list(group['betas']),
             'eps': group['eps']}
    tensors = {}

    for p in group['params']:
        state = optimizer.state.get(p)

        if not state:
            continue

        for key in ADAM_KEYS:
            tensors[f'adam.{key}.{names[id(p)]}'] = torch.as_tensor(state[key])

    return hyper, tensors


def save_checkpoint(fp: str, model: Model,
                    optimizer: Optional[torch.optim.Adam] = None,
                    meta: Optional[dict] = None):
    """Write model weights, buffers and optional Adam state to a file.

    Args:
        fp: Output filepath, overwritten.
        model: Model exposing ``config_dict``.
        optimizer: Adam optimizer over the model parameters.
        meta: JSON-serialisable extras (epoch, val_loss, ...).

    """
    config = dict(model.config_dict())
    tensors = dict(model.state_dict())

    if optimizer is not None:
        config['adam'], adam = _adam_tensors(model, optimizer)
        tensors.update(adam)
    if meta:
        config['meta'] = meta

    config_bytes = json.dumps(config, sort_keys=True).encode('utf-8')

    with open(fp, 'wb') as fh:
        fh.write(MAGIC)
        fh.write(struct.pack('<II', VERSION, len(config_bytes)))
        fh.write(config_bytes)
        fh.write(hashlib.sha256(config_bytes).digest())
        fh.write(struct.pack('<I', len(tensors)))

        for name, t in tensors.items():
            values = t.detach().cpu().to(torch.float32).numpy()
            encoded = name.encode('utf-8')

            fh.write(struct.pack('<H', len(encoded)) + encoded)
            fh.write(struct.pack('<B', values.ndim))
            fh.write(struct.pack(f'<{values.ndim}I', *values.shape))
            fh.write(values.astype('<f4').tobytes())


def read_checkpoint(fp: str) -> Checkpoint:
    """Decode a checkpoint file.

    Raises:
        CheckpointError: Bad magic, unsupported version, config digest
            mismatch or truncated data.

    """
    with open(require_file(fp), 'rb') as fh:
        data = fh.read()

    pos = 0

    def take(n):
        nonlocal pos
        chunk = data[pos:pos + n]

        if len(chunk) != n:
            raise CheckpointError(f'{fp}: truncated at byte {pos}')

        pos += n
        return chunk

    if take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f'{fp}: not a checkpoint file')

    version, n = struct.unpack('<II', take(8))

    if version != VERSION:
        raise CheckpointError(f'{fp}: unsupported checkpoint version '
                              f'{version}')

    config_bytes = take(n)

    if hashlib.sha256(config_bytes).digest() != take(32):
        raise CheckpointError(f'{fp}: config digest mismatch')

    config = json.loads(config_bytes.decode('utf-8'))
    tensors = {}
    (count,) = struct.unpack('<I', take(4))

    for _ in range(count):
        (n,) = struct.unpack('<H', take(2))
        name = take(n).decode('utf-8')
        (ndim,) = struct.unpack('<B', take(1))
        shape = struct.unpack(f'<{ndim}I', take(4 * ndim))
        values = np.frombuffer(take(4 * int(np.prod(shape))), dtype='<f4')
        tensors[name] = torch.from_numpy(values.reshape(shape).copy())

    if pos != len(data):
        raise CheckpointError(f'{fp}: trailing bytes after tensor table')

    return Checkpoint(config, tensors)


def model_from_checkpoint(ckpt: Checkpoint) -> Model:
    """Rebuild the model of a checkpoint in eval mode."""
    model = build_model(ckpt.config)
    expected = model.state_dict()
    stored = ckpt.model_state()

    missing = sorted(set(expected) - set(stored))
    unexpected = sorted(set(stored) - set(expected))

    if missing or unexpected:
        raise CheckpointError(f'checkpoint tensors do not match the model: '
                              f'missing {missing[:3]}, unexpected '
                              f'{unexpected[:3]}')

    state = {}

    for name, ref in expected.items():
        t = stored[name]

        if t.shape != ref.shape:
            raise CheckpointError(f'{name}: stored shape {tuple(t.shape)}, '
                                  f'model expects {tuple(ref.shape)}')

        state[name] = t.to(ref.dtype)

    model.load_state_dict(state)

    return model.eval()


def load_model(fp: str) -> Model:
    """Read a checkpoint file and rebuild its model in eval mode."""
    return model_from_checkpoint(read_checkpoint(fp))


def restore_optimizer(ckpt: Checkpoint, model: Model) -> torch.optim.Adam:
    """Adam optimizer over the model parameters with the stored moments."""
    hyper = ckpt.config.get('adam')

    if hyper is None:
        raise CheckpointError('checkpoint holds no optimizer state')

    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(params, lr=hyper['lr'],
                                 betas=tuple(hyper['betas']), eps=hyper['eps'])

    for name, p in model.named_parameters():
        key = f'adam.step.{name}'

        if key not in ckpt.tensors:
            continue

        state = optimizer.state[p]
        state['step'] = ckpt.tensors[key].clone().reshape(())

        for moment in ('exp_avg', 'exp_avg_sq'):
            t = ckpt.tensors[f'adam.{moment}.{name}']

            if t.shape != p.shape:
                raise ShapeError(f'{moment} of {name} has shape '
                                 f'{tuple(t.shape)}')

            state[moment] = t.to(p.dtype).clone()

    return optimizer
