"""Adapter that runs a Python `solver(...)` under the harness manifest contract.

Usage: python3 guest_runner.py <solver.py> <manifest.json>
"""
import importlib.util
import json
import struct
import sys

import numpy as np


def load_pdet(path):
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != b"PDET" or data[4] != 1 or data[5] != 0:
        raise ValueError(f"{path}: not a PDET v1 f64 file")
    ndim = data[6]
    dims = struct.unpack_from(f"<{ndim}Q", data, 7)
    offset = 7 + 8 * ndim
    return np.frombuffer(data, dtype="<f8", offset=offset).reshape(dims).copy()


def store_pdet(path, array):
    array = np.ascontiguousarray(np.asarray(array, dtype="<f8"))
    with open(path, "wb") as f:
        f.write(b"PDET" + bytes([1, 0, array.ndim]))
        f.write(struct.pack(f"<{array.ndim}Q", *array.shape))
        f.write(array.tobytes())


def main():
    source, manifest_path = sys.argv[1], sys.argv[2]
    with open(manifest_path) as f:
        manifest = json.load(f)
    spec = importlib.util.spec_from_file_location("candidate", source)
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    args = []
    for name in manifest["arguments"]:
        if name in manifest["input_paths"]:
            args.append(load_pdet(manifest["input_paths"][name]))
        else:
            args.append(manifest["params"][name])
    store_pdet(manifest["output_path"], module.solver(*args))


if __name__ == "__main__":
    main()
