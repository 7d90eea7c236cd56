import struct

import numpy as np
import pytest

from ossir import checkpoint
from ossir.errors import ParseError
from ossir.model import ModelConfig, build
from ossir.tensor import Tensor


@pytest.mark.parametrize("dtype", ["f32", "f64"])
def test_round_trip_bit_exact(tmp_path, dtype, rng):
    m = build(ModelConfig.tiny(dtype=dtype, seed=3, omni_scan=False))
    for _, p in m.named_parameters():
        p.data = (p.data + 0.01 * rng.standard_normal(p.shape)).astype(p.data.dtype)
    path = tmp_path / "m.vmir"
    checkpoint.save(path, m)
    back = checkpoint.load(path)
    assert back.config == m.config
    a, b = dict(m.named_parameters()), dict(back.named_parameters())
    assert a.keys() == b.keys()
    for k in a:
        assert a[k].data.dtype == b[k].data.dtype
        assert a[k].data.tobytes() == b[k].data.tobytes()
    x = Tensor(rng.random((1, 3, 16, 16)).astype(m.config.np_dtype))
    assert m(x).data.tobytes() == back(x).data.tobytes()
    checkpoint.save(tmp_path / "again.vmir", back)
    assert (tmp_path / "again.vmir").read_bytes() == path.read_bytes()


def test_dumps_layout():
    buf = checkpoint.dumps("a=1\n", {"w": np.arange(3, dtype=np.float32)})
    assert buf[:4] == b"VMIR"
    assert struct.unpack("<II", buf[4:12]) == (1, 4)
    assert buf[12:16] == b"a=1\n" and struct.unpack("<I", buf[16:20]) == (1,)
    cfg, t = checkpoint.loads(buf)
    assert cfg == "a=1\n" and t["w"].tolist() == [0, 1, 2]


def test_every_truncation_rejected():
    buf = checkpoint.dumps("k=v\n", {"a": np.ones((2, 2)), "b": np.zeros(3, np.float32)})
    for n in range(len(buf)):
        with pytest.raises(ParseError):
            checkpoint.loads(buf[:n])
    with pytest.raises(ParseError, match="trailing"):
        checkpoint.loads(buf + b"\x00")


def test_bad_magic_version_and_tag():
    buf = bytearray(checkpoint.dumps("", {"a": np.ones(1)}))
    with pytest.raises(ParseError, match="VMIR"):
        checkpoint.loads(b"XXXX" + bytes(buf[4:]))
    bad = bytearray(buf)
    bad[4] = 9
    with pytest.raises(ParseError, match="version"):
        checkpoint.loads(bytes(bad))
    tag_at = 4 + 4 + 4 + 0 + 4 + 4 + 1
    bad = bytearray(buf)
    bad[tag_at] = 7
    with pytest.raises(ParseError, match="dtype tag"):
        checkpoint.loads(bytes(bad))


def test_mismatched_tensors_rejected(tmp_path):
    m = build(ModelConfig.tiny())
    tensors = {n: p.data for n, p in m.named_parameters()}
    tensors.pop(next(iter(tensors)))
    (tmp_path / "x.vmir").write_bytes(checkpoint.dumps(m.config.to_text(), tensors))
    with pytest.raises(ParseError, match="do not match"):
        checkpoint.load(tmp_path / "x.vmir")
    tensors = {n: p.data for n, p in m.named_parameters()}
    name = next(n for n in tensors if n.startswith("tail"))
    tensors[name] = np.zeros((1, 1), np.float32)
    (tmp_path / "y.vmir").write_bytes(checkpoint.dumps(m.config.to_text(), tensors))
    with pytest.raises(ParseError, match="shape mismatch"):
        checkpoint.load(tmp_path / "y.vmir")
