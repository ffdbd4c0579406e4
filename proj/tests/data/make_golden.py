#!/usr/bin/env python3
"""Writes golden_dense.moef, an independent encoding of the checkpoint that
test_checkpoint.cpp rebuilds in C++ and must serialize byte for byte."""
import json
import struct
import sys
from pathlib import Path

CONFIG = {"n_layers": 1, "d_model": 2, "n_heads": 1, "d_ffn": 3, "vocab_size": 4,
          "max_seq_len": 8}


def shapes(c):
    d, f, v = c["d_model"], c["d_ffn"], c["vocab_size"]
    out = {"embed.weight": [v, d], "head.weight": [v, d], "final_norm.gain": [d]}
    for i in range(c["n_layers"]):
        p = f"layer.{i}."
        for w in ("wq", "wk", "wv", "wo"):
            out[p + "attn." + w] = [d, d]
        out[p + "attn_norm.gain"] = [d]
        out[p + "ffn.w_gate"] = [f, d]
        out[p + "ffn.w_up"] = [f, d]
        out[p + "ffn.w_down"] = [d, f]
        out[p + "ffn_norm.gain"] = [d]
    return out


def values(index, count):
    # tensor index t, element k -> (t + 1) * 0.125 + k * 0.5, alternating sign
    return [((index + 1) * 0.125 + k * 0.5) * (1 if k % 2 == 0 else -1) for k in range(count)]


def main():
    entries, payload, offset = [], b"", 0
    for t, (name, shape) in enumerate(sorted(shapes(CONFIG).items())):
        n = 1
        for s in shape:
            n *= s
        data = struct.pack(f"<{n}f", *values(t, n))
        entries.append({"name": name, "dtype": "f32", "shape": shape,
                        "byte_offset": offset, "byte_len": len(data)})
        payload += data
        offset += len(data)
    header = json.dumps({"config": CONFIG, "metadata": {"kind": "dense", "name": "golden"},
                         "tensors": entries}, separators=(",", ":"), sort_keys=True).encode()
    blob = b"MOEF" + struct.pack("<IQ", 1, len(header)) + header + payload
    out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(__file__).with_name("golden_dense.moef")
    out.write_bytes(blob)


if __name__ == "__main__":
    main()
