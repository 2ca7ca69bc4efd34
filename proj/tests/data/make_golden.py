"""Writes golden.rsd with a writer independent of the C++ code.

B=2, S=4, D=3; value[b][s][u] = (b*12 + s*3 + u) * 0.25 - 2.5, all exact in f32.
"""
import json
import struct
from pathlib import Path

B, S, D = 2, 4, 3
meta = {
    "dataset_name": "golden",
    "model_name": "python-writer",
    "params": {"note": "little-endian check", "unicode": "é中"},
    "seed": 7,
    "token_position": "last",
}
meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
values = [(i * 0.25) - 2.5 for i in range(B * S * D)]

out = bytearray(b"RSD1")
out += struct.pack("<5I", 1, B, S, D, len(meta_bytes))
out += meta_bytes
out += struct.pack("<%df" % len(values), *values)
Path(__file__).with_name("golden.rsd").write_bytes(bytes(out))
