"""Directory-based network checkpoints.

Layout: ``config.json`` (the architecture config), ``manifest.json`` mapping
tensor names to shapes, and one raw little-endian float32 blob per named
parameter or buffer (``<name>.bin``).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch


class CheckpointError(ValueError):
    """Raised on missing, extra, or shape-mismatched checkpoint tensors."""


def _named_tensors(module: torch.nn.Module) -> dict[str, torch.Tensor]:
    tensors = dict(module.named_parameters())
    tensors.update(dict(module.named_buffers()))
    return tensors


def save_network(module: torch.nn.Module, out_dir: str | Path, config: dict) -> None:
    """Write ``module``'s tensors plus its architecture config to ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {}
    for name, tensor in _named_tensors(module).items():
        arr = tensor.detach().cpu().numpy().astype("<f4")
        manifest[name] = list(arr.shape)
        with open(out_dir / f"{name}.bin", "wb") as fh:
            fh.write(arr.tobytes())
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    with open(out_dir / "config.json", "w", encoding="utf-8") as fh:
        json.dump(config, fh, indent=1, sort_keys=True)


def read_config(ckpt_dir: str | Path) -> dict:
    path = Path(ckpt_dir) / "config.json"
    if not path.exists():
        raise CheckpointError(f"missing config.json in {ckpt_dir}")
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def read_manifest(ckpt_dir: str | Path) -> dict[str, list[int]]:
    path = Path(ckpt_dir) / "manifest.json"
    if not path.exists():
        raise CheckpointError(f"missing manifest.json in {ckpt_dir}")
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def load_tensor(ckpt_dir: str | Path, name: str, shape: list[int]) -> np.ndarray:
    blob = Path(ckpt_dir) / f"{name}.bin"
    if not blob.exists():
        raise CheckpointError(f"missing parameter blob for layer {name!r}")
    data = np.frombuffer(blob.read_bytes(), dtype="<f4")
    expected = int(np.prod(shape)) if shape else 1
    if data.size != expected:
        raise CheckpointError(
            f"layer {name!r}: blob holds {data.size} values, manifest shape {shape} "
            f"requires {expected}"
        )
    return data.reshape(shape)


def load_network(module: torch.nn.Module, ckpt_dir: str | Path) -> None:
    """Load checkpoint tensors into ``module`` in place.

    Raises :class:`CheckpointError` naming the first layer whose shape does
    not match, and on tensors missing from either side.
    """
    ckpt_dir = Path(ckpt_dir)
    manifest = read_manifest(ckpt_dir)
    tensors = _named_tensors(module)
    missing = sorted(set(tensors) - set(manifest))
    extra = sorted(set(manifest) - set(tensors))
    if missing or extra:
        raise CheckpointError(
            f"checkpoint/model tensor mismatch: missing from checkpoint {missing}, "
            f"unused in model {extra}"
        )
    with torch.no_grad():
        for name, tensor in tensors.items():
            shape = manifest[name]
            if list(tensor.shape) != list(shape):
                raise CheckpointError(
                    f"layer {name!r}: model shape {list(tensor.shape)} != checkpoint shape {shape}"
                )
            arr = load_tensor(ckpt_dir, name, shape)
            tensor.copy_(torch.from_numpy(arr.copy()).to(tensor.dtype))
