"""Write FQNT golden payloads plus a plain-text description of each.

The bytes are assembled here independently of the Rust encoder.
"""
import random
import struct
import sys
from pathlib import Path


def pack_lsb_first(levels, bits):
    acc, filled, out = 0, 0, bytearray()
    for v in levels:
        acc |= v << filled
        filled += bits
        while filled >= 8:
            out.append(acc & 0xFF)
            acc >>= 8
            filled -= 8
    if filled:
        out.append(acc & 0xFF)
    return bytes(out)


def payload(client_id, layers, msqe=None, dataset_size=None, side_band=()):
    inverse = msqe is not None
    out = bytearray(b"FQNT")
    out += struct.pack("<BBH", 1, 1 if inverse else 0, len(layers))
    for i, layer in enumerate(layers):
        if layer[0] == "full":
            values = layer[1]
            out += struct.pack("<BI", 0, len(values))
            if inverse:
                out += struct.pack("<f", msqe[i])
            out += b"".join(struct.pack("<f", v) for v in values)
        else:
            _, bits, scale, levels = layer
            out += struct.pack("<BIf", bits, len(levels), scale)
            if inverse:
                out += struct.pack("<f", msqe[i])
            out += pack_lsb_first(levels, bits)
    if not inverse:
        out += struct.pack("<I", dataset_size)
    out += struct.pack("<I", len(side_band))
    out += b"".join(struct.pack("<f", v) for v in side_band)
    out += struct.pack("<I", client_id)
    return bytes(out)


def describe(client_id, layers, msqe=None, dataset_size=None, side_band=()):
    lines = [f"client_id {client_id}"]
    lines.append(f"msqe {' '.join(repr(v) for v in msqe)}" if msqe is not None
                 else f"dataset_size {dataset_size}")
    lines.append(f"side_band {' '.join(repr(float(v)) for v in side_band)}")
    for layer in layers:
        if layer[0] == "full":
            lines.append(f"full {' '.join(repr(float(v)) for v in layer[1])}")
        else:
            _, bits, scale, levels = layer
            lines.append(f"quantized {bits} {scale!r} {' '.join(map(str, levels))}")
    return "\n".join(lines) + "\n"


def main(out_dir):
    out = Path(out_dir)
    rng = random.Random(7)
    cases = {
        "fedavg_b2_single": dict(
            client_id=7, layers=[("q", 2, 0.5, [3, 0, 1])], dataset_size=600,
            side_band=[1.5, -2.0]),
        "msqe_4224_odd_counts": dict(
            client_id=3,
            layers=[("q", b, s, [rng.randrange(1 << b) for _ in range(n)])
                    for b, s, n in [(4, 0.25, 9), (2, 0.125, 13), (2, 1.5, 7), (4, 0.0625, 3)]],
            msqe=[0.5, 0.25, 0.125, 0.0], side_band=[0.0, 1.0, -0.75]),
        "fedavg_wide_bits": dict(
            client_id=4000000000,
            layers=[("q", b, 2.0, [rng.randrange(1 << b) for _ in range(5)]) for b in (1, 7, 13, 32)],
            dataset_size=1234567, side_band=[]),
        "msqe_full_precision": dict(
            client_id=0, layers=[("full", [1.0, -0.5, 0.25]), ("full", [])],
            msqe=[0.0, 0.0], side_band=[2.0]),
    }
    for name, case in cases.items():
        (out / f"{name}.fqnt").write_bytes(payload(**case))
        (out / f"{name}.txt").write_text(describe(**case))


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "crates/core/tests/golden")
