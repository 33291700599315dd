import json

import numpy as np
import pytest

from trimodal import tmf
from trimodal.errors import FormatError


def test_layout_is_magic_header_payload():
    blob = tmf.dumps(np.array([[1.0, 2.0, 3.0]]))
    magic, header, payload = blob.split(b"\n", 2)
    assert magic == b"TMF1"
    assert json.loads(header) == {"dtype": "f32", "shape": [1, 3]}
    np.testing.assert_array_equal(np.frombuffer(payload, "<f4"), [1, 2, 3])


@pytest.mark.parametrize("shape", [(0,), (5,), (2, 3), (2, 1, 4, 3)])
def test_roundtrip(tmp_path, shape):
    x = np.random.default_rng(0).standard_normal(shape).astype(np.float32)
    path = tmp_path / "x.tmf"
    tmf.save(path, x)
    np.testing.assert_array_equal(tmf.load(path), x)
    header = tmf.read_header(path)
    assert header["shape"] == list(shape) and header["payload_bytes"] == 4 * x.size


@pytest.mark.parametrize("blob", [b"TMF2\n{}\n", b"TMF1\n{\"dtype\":\"f64\",\"shape\":[1]}\n",
                                  b"TMF1\n{\"dtype\":\"f32\",\"shape\":[2]}\n\x00\x00\x00\x00",
                                  b"TMF1\n{\"dtype\":\"f32\",\"shape\":[-1]}\n", b"TMF1\nnoheader"])
def test_rejects_malformed(blob):
    with pytest.raises(FormatError):
        tmf.loads(blob)


def test_refuses_non_finite():
    with pytest.raises(ValueError):
        tmf.dumps(np.array([np.nan]))
