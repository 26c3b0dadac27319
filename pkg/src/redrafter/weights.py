"""Weight files: a UTF-8 manifest plus one raw little-endian float32 blob.

Manifest layout::

    REDRAFT-WEIGHTS v1          (or REDRAFT-DRAFTER v1)
    # key value                  header entries (config, training horizon)
    name f32 d0,d1 offset        one tensor per line, byte offset into the blob

The format is bit-exact and language-neutral: a save/load round trip
reproduces every tensor byte for byte.
"""

import os

import numpy as np

from .errors import FormatError
from .drafter import DrafterParams
from .model import ModelConfig, TinyTransformer

BASE_MAGIC = "REDRAFT-WEIGHTS v1"
DRAFTER_MAGIC = "REDRAFT-DRAFTER v1"


def save_tensors(prefix, magic, tensors, header=None):
    """Write ``prefix.manifest`` and ``prefix.bin`` for named float32 tensors."""
    lines = [magic]
    for key, value in (header or {}).items():
        lines.append(f"# {key} {value}")
    offset = 0
    blob = bytearray()
    for name, arr in tensors:
        arr = np.ascontiguousarray(arr, dtype="<f4")
        dims = ",".join(str(d) for d in arr.shape)
        lines.append(f"{name} f32 {dims} {offset}")
        raw = arr.tobytes()
        blob.extend(raw)
        offset += len(raw)
    with open(prefix + ".manifest", "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(prefix + ".bin", "wb") as fh:
        fh.write(bytes(blob))


def load_tensors(prefix, magic):
    """Read a manifest/blob pair back into (header dict, ordered tensor list)."""
    manifest_path = prefix + ".manifest"
    blob_path = prefix + ".bin"
    if not os.path.exists(manifest_path):
        raise FileNotFoundError(manifest_path)
    with open(manifest_path, encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines or lines[0] != magic:
        found = repr(lines[0]) if lines else "<empty>"
        raise FormatError(f"{manifest_path}: bad magic line {found}, expected {magic!r}")
    with open(blob_path, "rb") as fh:
        blob = fh.read()

    header = {}
    tensors = []
    for ln in lines[1:]:
        if ln.startswith("#"):
            key, _, value = ln[1:].strip().partition(" ")
            header[key] = value
            continue
        parts = ln.split()
        if len(parts) != 4:
            raise FormatError(f"{manifest_path}: malformed tensor line {ln!r}")
        name, dtype, dims, offset = parts
        if dtype != "f32":
            raise FormatError(f"tensor {name}: unsupported dtype {dtype}")
        shape = tuple(int(d) for d in dims.split(","))
        offset = int(offset)
        count = int(np.prod(shape))
        end = offset + 4 * count
        if end > len(blob):
            raise FormatError(f"tensor {name}: blob truncated "
                              f"(needs bytes up to {end}, have {len(blob)})")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape)
        tensors.append((name, arr.copy()))
    return header, tensors


# ---------------------------------------------------------------------------
# base model
# ---------------------------------------------------------------------------

_CONFIG_KEYS = ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_seq_len")


def save_base_model(model, prefix):
    header = {key: getattr(model.config, key) for key in _CONFIG_KEYS}
    save_tensors(prefix, BASE_MAGIC, sorted(model.weights.items()), header)


def load_base_model(prefix):
    header, tensors = load_tensors(prefix, BASE_MAGIC)
    try:
        config = ModelConfig(**{key: int(header[key]) for key in _CONFIG_KEYS})
    except KeyError as exc:
        raise FormatError(f"manifest missing config key {exc}") from exc
    weights = dict(tensors)
    expected = TinyTransformer.weight_shapes(config)
    for name, shape in expected.items():
        if name not in weights:
            raise FormatError(f"missing tensor {name}")
        if weights[name].shape != shape:
            raise FormatError(f"tensor {name}: expected shape {shape}, "
                              f"got {weights[name].shape}")
    return TinyTransformer(config, weights)


# ---------------------------------------------------------------------------
# drafter
# ---------------------------------------------------------------------------

def save_drafter(params, horizon, prefix):
    header = {"horizon": horizon, "n_mlp": len(params.mlp), "d_s": params.d_s}
    save_tensors(prefix, DRAFTER_MAGIC, params.flat_arrays(), header)


def load_drafter(prefix):
    """Returns (DrafterParams, training horizon)."""
    header, tensors = load_tensors(prefix, DRAFTER_MAGIC)
    named = dict(tensors)
    try:
        horizon = int(header["horizon"])
        n_mlp = int(header["n_mlp"])
        arrays = {name: named[name].astype(np.float64)
                  for name in ("u", "w", "b", "out_proj")}
        mlp = [(named[f"mlp{i}_w"].astype(np.float64),
                named[f"mlp{i}_b"].astype(np.float64)) for i in range(n_mlp)]
    except KeyError as exc:
        raise FormatError(f"drafter manifest missing {exc}") from exc
    params = DrafterParams(u=arrays["u"], w=arrays["w"], b=arrays["b"],
                           mlp=mlp, out_proj=arrays["out_proj"])
    return params, horizon
