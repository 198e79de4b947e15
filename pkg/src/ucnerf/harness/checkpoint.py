"""Checkpoint container: named float arrays plus JSON metadata in one ``.npz``.

Array names: ``model/<parameter name>`` for every module parameter and
buffer, ``optim/<index>/<state key>`` for optimizer state. The metadata
holds the config hash, dataset fingerprint, iteration and optimizer
hyper-parameters. Files are byte-stable for identical content.
"""

from __future__ import annotations

import numpy as np
import torch

from ..io import load_npz, save_npz


def save_checkpoint(path, model: torch.nn.Module, optimizer=None, meta: dict | None = None) -> None:
    arrays = {f"model/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    meta = dict(meta or {})
    if optimizer is not None:
        state = optimizer.state_dict()
        for i, s in state["state"].items():
            for key, val in s.items():
                arrays[f"optim/{i}/{key}"] = torch.as_tensor(val).detach().cpu().numpy()
        meta["optimizer_groups"] = state["param_groups"]
    save_npz(path, arrays, meta)


def load_checkpoint(path, model: torch.nn.Module, optimizer=None) -> dict:
    """Restore parameters (and optimizer state if given); returns the metadata."""
    arrays, meta = load_npz(path)
    meta = meta or {}
    state = {k[len("model/"):]: torch.from_numpy(np.array(v)) for k, v in arrays.items() if k.startswith("model/")}
    model.load_state_dict(state)
    if optimizer is not None:
        opt_state = {}
        for k, v in arrays.items():
            if not k.startswith("optim/"):
                continue
            _, i, key = k.split("/", 2)
            opt_state.setdefault(int(i), {})[key] = torch.from_numpy(np.array(v))
        groups = meta.get("optimizer_groups", optimizer.state_dict()["param_groups"])
        optimizer.load_state_dict({"state": opt_state, "param_groups": groups})
    return meta
