"""Checkpoint directories: one matrix text file per tensor plus a JSON
manifest naming every tensor and carrying the model configuration."""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

from .errors import ManifestError
from .linalg import read_matrix_text, write_matrix_text
from .net import ModelConfig, ModelParams, param_shapes

MANIFEST_NAME = "manifest.json"


def save_checkpoint(directory, model: ModelParams, step: int) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensor_files = {}
    for name, tensor in model.tensors.items():
        filename = name + ".txt"
        mat = tensor[None, :] if tensor.ndim == 1 else tensor
        write_matrix_text(directory / filename, mat)
        tensor_files[name] = filename
    manifest = {
        "step": int(step),
        "config": dataclasses.asdict(model.cfg),
        "tensors": tensor_files,
    }
    (directory / MANIFEST_NAME).write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def load_checkpoint(directory):
    """Returns (ModelParams, step)."""
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.is_file():
        raise ManifestError(f"missing {MANIFEST_NAME} in {directory}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    for key in ("step", "config", "tensors"):
        if key not in manifest:
            raise ManifestError(f"{manifest_path}: missing field {key!r}")
    try:
        cfg = ModelConfig(**manifest["config"])
    except (TypeError, ValueError) as exc:
        raise ManifestError(f"{manifest_path}: bad config: {exc}") from None
    shapes = param_shapes(cfg)
    if set(manifest["tensors"]) != set(shapes):
        raise ManifestError(f"{manifest_path}: tensor names do not match the config")
    tensors = {}
    for name, shape in shapes.items():
        mat = read_matrix_text(directory / manifest["tensors"][name])
        if len(shape) == 1:
            if mat.shape != (1, shape[0]):
                raise ManifestError(f"{name}: expected shape {(1, shape[0])}, got {mat.shape}")
            tensors[name] = mat[0].copy()
        else:
            if mat.shape != shape:
                raise ManifestError(f"{name}: expected shape {shape}, got {mat.shape}")
            tensors[name] = mat
    return ModelParams(cfg, tensors), int(manifest["step"])
