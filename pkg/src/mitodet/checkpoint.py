"""Parameter archive: a compressed ``.npz`` of named arrays plus a JSON
name-to-shape manifest written alongside. Used for detector/classifier
checkpoints and as the hook for loading externally pre-trained weights.
"""

import json
from pathlib import Path

import numpy as np
import torch

MANIFEST_SUFFIX = ".manifest.json"
META_KEY = "__meta__"


def module_arrays(module):
    """State dict of a module as plain float64-safe numpy arrays."""
    return {name: tensor.detach().cpu().numpy() for name, tensor in module.state_dict().items()}


def save_checkpoint(path, arrays, meta=None):
    """Write named arrays and a metadata dict; the sidecar manifest lists
    every array name with its shape and dtype."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = dict(meta or {})
    payload = {k: np.asarray(v) for k, v in arrays.items()}
    np.savez_compressed(path, **payload, **{META_KEY: np.frombuffer(
        json.dumps(meta).encode(), dtype=np.uint8)})
    manifest = {
        "meta": meta,
        "arrays": {k: {"shape": list(v.shape), "dtype": str(v.dtype)} for k, v in payload.items()},
    }
    with open(str(path) + MANIFEST_SUFFIX, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return path


def load_checkpoint(path):
    """Return (arrays dict, meta dict)."""
    with np.load(path, allow_pickle=False) as data:
        arrays = {k: data[k] for k in data.files if k != META_KEY}
        meta = {}
        if META_KEY in data.files:
            meta = json.loads(bytes(data[META_KEY]).decode())
    return arrays, meta


def load_into_module(module, arrays, strict=True):
    """Copy named arrays into a module, verifying shapes against the manifest
    contract. With ``strict=False`` unmatched names are skipped and returned."""
    state = module.state_dict()
    skipped = []
    for name, tensor in state.items():
        if name not in arrays:
            if strict:
                raise KeyError(f"checkpoint is missing parameter {name!r}")
            skipped.append(name)
            continue
        arr = arrays[name]
        if tuple(arr.shape) != tuple(tensor.shape):
            if strict:
                raise ValueError(f"shape mismatch for {name!r}: checkpoint {arr.shape} "
                                 f"vs module {tuple(tensor.shape)}")
            skipped.append(name)
            continue
        state[name] = torch.from_numpy(np.array(arr)).to(tensor.dtype)
    extra = set(arrays) - set(state)
    if strict and extra:
        raise KeyError(f"checkpoint has unknown parameter(s): {sorted(extra)[:5]}")
    module.load_state_dict(state)
    return skipped
