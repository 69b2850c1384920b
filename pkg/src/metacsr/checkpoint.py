"""Checkpoint serialization.

Layout: the ASCII header line ``METACSR-CKPT v1``, then one block per
tensor: a line ``<name> <ndim> <dim0> <dim1> ...`` followed immediately by
the row-major little-endian IEEE-754 32-bit payload. theta1 tensors carry a
``theta1/`` prefix, theta2 ``theta2/``, and optimizer state lives under
``state/``. Tensors are written in sorted-name order so identical models
produce identical bytes.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .params import ModelConfig, ModelParams

HEADER = b"METACSR-CKPT v1\n"


def write_tensors(path, tensors: dict[str, np.ndarray]):
    with Path(path).open("wb") as fh:
        fh.write(HEADER)
        for name in sorted(tensors):
            if " " in name or "\n" in name:
                raise ValueError(f"tensor name {name!r} contains whitespace")
            arr = np.asarray(tensors[name], dtype="<f4")
            dims = " ".join(str(d) for d in arr.shape)
            fh.write(f"{name} {arr.ndim}{' ' + dims if dims else ''}\n"
                     .encode("ascii"))
            fh.write(arr.tobytes())


def read_tensors(path) -> dict[str, np.ndarray]:
    tensors: dict[str, np.ndarray] = {}
    with Path(path).open("rb") as fh:
        if fh.readline() != HEADER:
            raise ValueError(f"{path}: not a METACSR-CKPT v1 file")
        while True:
            line = fh.readline()
            if not line:
                break
            fields = line.decode("ascii").split()
            name, ndim = fields[0], int(fields[1])
            shape = tuple(int(d) for d in fields[2:2 + ndim])
            count = int(np.prod(shape)) if shape else 1
            payload = fh.read(count * 4)
            if len(payload) != count * 4:
                raise ValueError(f"{path}: truncated payload for {name!r}")
            arr = np.frombuffer(payload, dtype="<f4", count=count)
            tensors[name] = arr.reshape(shape).astype(np.float64)
    return tensors


def save_model(path, params: ModelParams, adam_state=None):
    """Write parameters (and optionally Adam state) plus a sidecar
    ``<path>.meta.json`` describing the architecture."""
    tensors = {}
    for name, value in params.theta1.items():
        tensors[f"theta1/{name}"] = value
    for name, value in params.theta2.items():
        tensors[f"theta2/{name}"] = value
    if adam_state is not None:
        for name, value in adam_state.first.items():
            tensors[f"state/m/{name}"] = value
        for name, value in adam_state.second.items():
            tensors[f"state/v/{name}"] = value
        tensors["state/step"] = np.asarray(float(adam_state.step))
    write_tensors(path, tensors)
    cfg = params.config
    meta = {
        "dim": cfg.dim, "diffusion_depth": cfg.diffusion_depth,
        "neighbor_cap": cfg.neighbor_cap, "aggregator": cfg.aggregator,
        "scorer": cfg.scorer, "use_diffusion": cfg.use_diffusion,
        "use_sequence": cfg.use_sequence,
        "untie_directions": cfg.untie_directions,
        "t_min": cfg.t_min, "t_max": cfg.t_max,
        "n_entities": params.n_entities,
    }
    with Path(str(path) + ".meta.json").open("w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_model(path):
    """Returns (ModelParams, raw state tensors or None)."""
    tensors = read_tensors(path)
    meta_path = Path(str(path) + ".meta.json")
    config = ModelConfig()
    if meta_path.exists():
        with meta_path.open("r", encoding="utf-8") as fh:
            meta = json.load(fh)
        config = ModelConfig(**{k: meta[k] for k in (
            "dim", "diffusion_depth", "neighbor_cap", "aggregator", "scorer",
            "use_diffusion", "use_sequence", "untie_directions",
            "t_min", "t_max")})
    theta1 = {}
    theta2 = {}
    state = {}
    for name, value in tensors.items():
        if name.startswith("theta1/"):
            theta1[name[len("theta1/"):]] = value
        elif name.startswith("theta2/"):
            theta2[name[len("theta2/"):]] = value
        elif name.startswith("state/"):
            state[name[len("state/"):]] = value
        else:
            raise ValueError(f"{path}: unknown tensor prefix in {name!r}")
    params = ModelParams(theta1=theta1, theta2=theta2, config=config)
    return params, (state or None)
