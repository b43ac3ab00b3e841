"""Named-array checkpoint files.

A checkpoint is an uncompressed ``.npz`` archive: an ordered list of named
arrays, each carrying its own dtype and shape header, plus a JSON metadata
record stored under ``__meta__``.
"""

from __future__ import annotations

import json
import os
import tempfile
from collections import OrderedDict

import numpy as np
import torch

META_KEY = "__meta__"


def save_named_arrays(path, arrays, meta=None) -> None:
    """Write ``arrays`` (name -> ndarray/tensor) atomically to ``path``."""
    payload = OrderedDict()
    for name, value in arrays.items():
        if name == META_KEY:
            raise ValueError(f"{META_KEY} is reserved")
        if isinstance(value, torch.Tensor):
            value = value.detach().cpu().numpy()
        payload[name] = np.asarray(value)
    payload[META_KEY] = np.frombuffer(json.dumps(meta or {}, sort_keys=True).encode(), dtype=np.uint8)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".npz")
    os.close(fd)
    try:
        np.savez(tmp, **payload)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def load_named_arrays(path) -> tuple[OrderedDict, dict]:
    with np.load(path, allow_pickle=False) as data:
        arrays = OrderedDict((k, data[k]) for k in data.files if k != META_KEY)
        meta = json.loads(bytes(data[META_KEY]).decode()) if META_KEY in data.files else {}
    return arrays, meta


def module_arrays(module: torch.nn.Module, prefix: str) -> OrderedDict:
    return OrderedDict((f"{prefix}/{k}", v) for k, v in module.state_dict().items())


def load_module_arrays(module: torch.nn.Module, arrays, prefix: str) -> None:
    sub = {k[len(prefix) + 1 :]: torch.from_numpy(np.array(v)) for k, v in arrays.items() if k.startswith(prefix + "/")}
    module.load_state_dict(sub, strict=True)


def optimizer_arrays(opt: torch.optim.Optimizer, prefix: str) -> tuple[OrderedDict, dict]:
    """Flatten optimizer state into named arrays plus a JSON-able header."""
    sd = opt.state_dict()
    arrays = OrderedDict()
    scalars = {}
    for idx, state in sd["state"].items():
        for key, value in state.items():
            if isinstance(value, torch.Tensor):
                arrays[f"{prefix}/state/{idx}/{key}"] = value
            else:
                scalars[f"{idx}/{key}"] = value
    return arrays, {"param_groups": sd["param_groups"], "scalars": scalars}


def load_optimizer_arrays(opt: torch.optim.Optimizer, arrays, header: dict, prefix: str) -> None:
    state: dict = {}
    for name, value in arrays.items():
        if not name.startswith(prefix + "/state/"):
            continue
        idx, key = name[len(prefix) + 7 :].split("/", 1)
        state.setdefault(int(idx), {})[key] = torch.from_numpy(np.array(value))
    for name, value in header.get("scalars", {}).items():
        idx, key = name.split("/", 1)
        state.setdefault(int(idx), {})[key] = value
    opt.load_state_dict({"state": state, "param_groups": header["param_groups"]})
