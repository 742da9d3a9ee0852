'''
Reader and writer for INVDIFF1 tensor files.

Layout: 8 magic bytes, u32 little-endian header length, UTF-8 JSON header,
then the float32 little-endian payload in C order (k slowest, n fastest).
'''
import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import numpy as np

from data_processing.grid import ImageGrid, InvDiffError, PsdrStack, SigmaGrid

MAGIC = b'INVDIFF1'
PAYLOAD_DTYPE = 'f32le'
_NUMPY_DTYPE = np.dtype('<f4')
_HEADER_KEYS = ('dtype', 'shape', 'order', 'sigma_edges', 'pixel_pitch')


class TensorFormatError(InvDiffError, ValueError):
    '''Raised when a tensor file or header is malformed.'''


def _encode_header(header: Dict[str, Any]) -> bytes:
    # fixed key order keeps files byte-identical for identical inputs
    ordered = {key: header[key] for key in _HEADER_KEYS if header.get(key) is not None}
    extra = sorted(set(header) - set(_HEADER_KEYS))
    ordered.update((key, header[key]) for key in extra)
    return json.dumps(ordered, separators=(',', ':'), ensure_ascii=True).encode('utf-8')


def tensor_write(path: Path, header: Dict[str, Any], payload: np.ndarray) -> None:
    '''
    Writes payload as an INVDIFF1 file. The header's "shape" must match the
    payload element count; "dtype" and "order" are filled in when missing.
    '''
    payload = np.asarray(payload)
    if payload.ndim not in (2, 3):
        raise TensorFormatError(f'only 2D and 3D tensors are supported, got {payload.ndim}D')
    header = dict(header)
    shape = [int(s) for s in header.get('shape', payload.shape)]
    if len(shape) not in (2, 3) or any(s < 1 for s in shape):
        raise TensorFormatError(f'invalid shape in header: {shape!r}')
    if int(np.prod(shape)) != payload.size:
        raise TensorFormatError(f'shape mismatch: header {shape} vs payload of {payload.size} elements')
    header['shape'] = shape
    header.setdefault('dtype', PAYLOAD_DTYPE)
    header.setdefault('order', 'kmn' if len(shape) == 3 else 'mn')
    if header['dtype'] != PAYLOAD_DTYPE:
        raise TensorFormatError(f'unknown dtype {header["dtype"]!r}')

    encoded = _encode_header(header)
    body = np.ascontiguousarray(payload.reshape(shape), dtype=_NUMPY_DTYPE).tobytes(order='C')

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'wb') as f:
        f.write(MAGIC)
        f.write(len(encoded).to_bytes(4, 'little'))
        f.write(encoded)
        f.write(body)
    logging.debug('Wrote tensor %s with shape %s (%d header bytes)', path, shape, len(encoded))


def tensor_read(path: Path) -> Tuple[Dict[str, Any], np.ndarray]:
    '''
    Reads an INVDIFF1 file; the payload is returned as float32 with the
    header's shape.
    '''
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:8] != MAGIC:
        raise TensorFormatError('bad magic')
    header_len = int.from_bytes(raw[8:12], 'little')
    if 12 + header_len > len(raw):
        raise TensorFormatError('header length exceeds file size')
    try:
        header = json.loads(raw[12:12 + header_len].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise TensorFormatError(f'unreadable header: {e}') from e

    if header.get('dtype') != PAYLOAD_DTYPE:
        raise TensorFormatError(f'unknown dtype {header.get("dtype")!r}')
    shape = header.get('shape')
    if not isinstance(shape, list) or len(shape) not in (2, 3) or any(
            not isinstance(s, int) or s < 1 for s in shape):
        raise TensorFormatError(f'invalid shape in header: {shape!r}')

    payload = raw[12 + header_len:]
    if len(payload) != _NUMPY_DTYPE.itemsize * int(np.prod(shape)):
        raise TensorFormatError('payload length mismatch')
    data = np.frombuffer(payload, dtype=_NUMPY_DTYPE).reshape(shape).copy()
    return header, data


def save_image(path: Path, image: ImageGrid) -> None:
    '''Writes an ImageGrid (2D tensor) keeping its pixel pitch.'''
    tensor_write(path, {'pixel_pitch': image.pixel_pitch}, image.data)


def load_image(path: Path) -> ImageGrid:
    '''Reads a 2D tensor as an ImageGrid.'''
    header, data = tensor_read(path)
    if data.ndim != 2:
        raise TensorFormatError(f'{path} holds a {data.ndim}D tensor, expected an image')
    return ImageGrid(data.astype(np.float64), float(header.get('pixel_pitch', 1.0)))


def save_psdr(path: Path, psdr: PsdrStack) -> None:
    '''Writes a PsdrStack with its sigma edges and aleph.'''
    tensor_write(path, {
        'sigma_edges': list(psdr.sigma.edges),
        'pixel_pitch': psdr.pixel_pitch,
        'aleph': list(psdr.sigma.aleph),
    }, psdr.coeffs)


def load_psdr(path: Path, sigma: Optional[SigmaGrid] = None) -> PsdrStack:
    '''
    Reads a 3D tensor as a PsdrStack. The sigma grid comes from the header
    unless one is given explicitly.
    '''
    header, data = tensor_read(path)
    if data.ndim != 3:
        raise TensorFormatError(f'{path} holds a {data.ndim}D tensor, expected a K×M×N stack')
    if sigma is None:
        if 'sigma_edges' not in header:
            raise TensorFormatError(f'{path} has no sigma_edges in its header')
        sigma = SigmaGrid(tuple(header['sigma_edges']), tuple(header['aleph']) if 'aleph' in header else None)
    return PsdrStack(data.astype(np.float64), sigma, float(header.get('pixel_pitch', 1.0)))


def write_sidecar(path: Path, values: Dict[str, Any]) -> None:
    '''Writes the small JSON sidecar that travels with an observation.'''
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(values, f, indent=2, sort_keys=True)
