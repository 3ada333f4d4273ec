import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from customttt import container
from customttt.container import CorruptContainerError, VersionMismatchError


def test_layout_is_little_endian_with_manifest():
    blob = container.encode({"w": np.arange(6, dtype=np.float32).reshape(2, 3)}, {"k": 1})
    magic, version, mlen = struct.unpack_from("<4sHI", blob)
    assert magic == b"CTTT" and version == 1
    manifest = json.loads(blob[10 : 10 + mlen])
    assert manifest["arrays"] == [{"name": "w", "dtype": "f32", "shape": [2, 3]}]
    assert manifest["meta"] == {"k": 1}
    assert blob[10 + mlen :] == np.arange(6, dtype="<f4").tobytes()


@settings(max_examples=30, deadline=None)
@given(arrs=st.lists(hnp.arrays(st.sampled_from([np.float32, np.float64]), hnp.array_shapes(min_dims=0, max_dims=3, max_side=4)),
                     min_size=0, max_size=4))
def test_roundtrip_bit_exact(arrs):
    arrays = {f"a{i}": a for i, a in enumerate(arrs)}
    out, meta = container.decode(container.encode(arrays, {"x": [1, 2]}))
    assert meta == {"x": [1, 2]} and list(out) == list(arrays)
    for k, a in arrays.items():
        assert out[k].dtype == a.dtype and out[k].tobytes() == a.tobytes()


def test_errors():
    blob = container.encode({"w": np.ones(4)})
    for cut in (3, 12, len(blob) - 1):
        with pytest.raises(CorruptContainerError):
            container.decode(blob[:cut])
    with pytest.raises(CorruptContainerError):
        container.decode(blob + b"\0")
    with pytest.raises(CorruptContainerError):
        container.decode(b"XTTT" + blob[4:])
    with pytest.raises(VersionMismatchError):
        container.decode(blob[:4] + struct.pack("<H", 9) + blob[6:])
    with pytest.raises(TypeError):
        container.encode({"i": np.arange(3)})


def test_save_is_atomic(tmp_path):
    p = tmp_path / "x.cttt"
    container.save(p, {"a": np.zeros(2)})
    assert [f.name for f in tmp_path.iterdir()] == ["x.cttt"]
    assert container.load(p)[0]["a"].shape == (2,)
