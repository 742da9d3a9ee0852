'''Tests for the INVDIFF1 tensor format and the grid types it stores.'''
import hashlib
import json
import struct

import numpy as np
import pytest

from data_processing.grid import (ImageGrid, PsdrStack, ShapeMismatchError,
                                  SigmaGrid, WeightMaps)
from data_processing.tensor_io import (MAGIC, TensorFormatError, load_image,
                                       load_psdr, save_image, save_psdr,
                                       tensor_read, tensor_write)


@pytest.fixture
def random_stack():
    '''Provides a K=8, 16x16 float32 stack with a matching sigma grid.'''
    rng = np.random.default_rng(7)
    sigma = SigmaGrid.uniform(2.0, 10.0, 8)
    return PsdrStack(rng.random((8, 16, 16)).astype(np.float32), sigma, 0.65)


def test_single_zero_layout(tmp_path):
    '''A 1x1x1 zero tensor is magic + header length + header + four zero bytes.'''
    path = tmp_path / 'zero.invdiff'
    tensor_write(path, {}, np.zeros((1, 1, 1)))
    raw = path.read_bytes()
    header_len = struct.unpack('<I', raw[8:12])[0]
    assert raw[:8] == MAGIC
    assert len(raw) == 12 + header_len + 4
    assert raw[-4:] == b'\x00\x00\x00\x00'
    header = json.loads(raw[12:12 + header_len])
    assert header == {'dtype': 'f32le', 'shape': [1, 1, 1], 'order': 'kmn'}


def test_image_round_trip_is_bitwise(tmp_path):
    '''A 2x2 image reads back with identical bits.'''
    path = tmp_path / 'img.invdiff'
    data = np.array([[0.1, -2.5], [3.0e7, 1e-30]], dtype=np.float32)
    tensor_write(path, {'pixel_pitch': 0.5}, data)
    header, back = tensor_read(path)
    assert back.dtype == np.float32
    assert back.tobytes() == data.tobytes()
    assert header['pixel_pitch'] == 0.5


def test_random_round_trips(tmp_path):
    '''read(write(x)) equals x bitwise for random 2D and 3D tensors.'''
    rng = np.random.default_rng(0)
    for i, shape in enumerate([(3, 5), (2, 4, 6), (1, 1), (5, 1, 9)]):
        data = rng.standard_normal(shape).astype(np.float32)
        path = tmp_path / f't{i}.invdiff'
        tensor_write(path, {}, data)
        _, back = tensor_read(path)
        assert back.shape == shape
        assert np.array_equal(back.view(np.uint32), data.view(np.uint32))


def test_stack_file_is_reproducible(tmp_path, random_stack):
    '''Writing the same stack twice gives byte-identical files.'''
    first, second = tmp_path / 'a.invdiff', tmp_path / 'b.invdiff'
    save_psdr(first, random_stack)
    save_psdr(second, random_stack)
    assert hashlib.sha256(first.read_bytes()).hexdigest() == hashlib.sha256(second.read_bytes()).hexdigest()
    back = load_psdr(first)
    assert back.sigma == random_stack.sigma
    assert back.pixel_pitch == 0.65
    assert np.array_equal(back.coeffs, random_stack.coeffs)


def test_ramp_indexing_order(tmp_path):
    '''Element (k, m, n) sits at payload offset 4*(k*M*N + m*N + n).'''
    k, m, n = 3, 4, 5
    ramp = np.arange(k * m * n, dtype=np.float32).reshape(k, m, n)
    path = tmp_path / 'ramp.invdiff'
    tensor_write(path, {}, ramp)
    raw = path.read_bytes()
    start = 12 + struct.unpack('<I', raw[8:12])[0]
    for (kk, mm, nn) in [(0, 0, 0), (1, 2, 3), (2, 3, 4), (0, 1, 0)]:
        offset = start + 4 * (kk * m * n + mm * n + nn)
        assert struct.unpack('<f', raw[offset:offset + 4])[0] == ramp[kk, mm, nn]


def test_truncated_payload(tmp_path):
    '''Dropping payload bytes is reported as a payload length mismatch.'''
    path = tmp_path / 't.invdiff'
    tensor_write(path, {}, np.ones((2, 2)))
    path.write_bytes(path.read_bytes()[:-2])
    with pytest.raises(TensorFormatError, match='payload length mismatch'):
        tensor_read(path)


def test_bad_magic(tmp_path):
    '''A file without the INVDIFF1 magic is rejected.'''
    path = tmp_path / 't.invdiff'
    tensor_write(path, {}, np.ones((2, 2)))
    path.write_bytes(b'INVDIFF2' + path.read_bytes()[8:])
    with pytest.raises(TensorFormatError, match='bad magic'):
        tensor_read(path)


def test_unknown_dtype(tmp_path):
    '''Headers naming any dtype other than f32le are rejected on both ends.'''
    with pytest.raises(TensorFormatError, match='unknown dtype'):
        tensor_write(tmp_path / 'x.invdiff', {'dtype': 'f64le'}, np.ones((2, 2)))

    header = json.dumps({'dtype': 'f16le', 'shape': [1, 1]}).encode()
    path = tmp_path / 'y.invdiff'
    path.write_bytes(MAGIC + struct.pack('<I', len(header)) + header + b'\x00\x00')
    with pytest.raises(TensorFormatError, match='unknown dtype'):
        tensor_read(path)


def test_header_shape_mismatch(tmp_path):
    '''A header shape that disagrees with the payload size is refused.'''
    with pytest.raises(TensorFormatError, match='shape mismatch'):
        tensor_write(tmp_path / 'x.invdiff', {'shape': [3, 3]}, np.ones((2, 2)))


def test_header_shape_must_be_readable(tmp_path):
    '''A header shape the reader would refuse is rejected before anything is written.'''
    path = tmp_path / 'x.invdiff'
    with pytest.raises(TensorFormatError, match='invalid shape'):
        tensor_write(path, {'shape': [2, 2, 2, 2]}, np.zeros((4, 4)))
    with pytest.raises(TensorFormatError, match='invalid shape'):
        tensor_write(path, {'shape': [-2, -2]}, np.zeros((2, 2)))
    assert not path.exists()


def test_image_helpers_keep_pitch(tmp_path):
    '''save_image/load_image preserve values and pixel pitch.'''
    image = ImageGrid(np.arange(6, dtype=float).reshape(2, 3), pixel_pitch=0.25)
    save_image(tmp_path / 'img.invdiff', image)
    back = load_image(tmp_path / 'img.invdiff')
    assert back.pixel_pitch == 0.25
    assert np.array_equal(back.data, image.data)


def test_grid_type_invariants():
    '''Invalid grids, stacks and weights are rejected at construction.'''
    with pytest.raises(ValueError):
        SigmaGrid((1.0, 1.0, 2.0))
    with pytest.raises(ValueError):
        SigmaGrid((1.0, 2.0), aleph=(2,))
    with pytest.raises(ValueError):
        ImageGrid(np.array([[np.nan]]))
    with pytest.raises(ShapeMismatchError):
        PsdrStack(np.zeros((2, 3, 3)), SigmaGrid((1.0, 2.0)))
    with pytest.raises(ValueError):
        WeightMaps(np.ones((2, 2)), np.full((2, 2), 0.5))

    sigma = SigmaGrid((1.0, 2.0, 4.0, 7.0), aleph=(3, 1))
    assert sigma.aleph == (1, 3)
    assert list(sigma.aleph_index) == [0, 2]
    assert list(sigma.complement_index) == [1]
    assert np.allclose(sigma.widths, [1.0, 2.0, 3.0])
