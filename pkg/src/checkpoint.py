"""
checkpoint.py
Model checkpoints: checkpoint.json (architecture, dims, seed, step, parameter
manifest) next to checkpoint.bin (little-endian f32 values, concatenated in
manifest order: layers in build order, weight before bias).
"""
import json
import logging
from pathlib import Path

import numpy as np

from app.models import MixtureSpec, PredictorSpec
from src.errors import FusionLabError, ShapeError
from src.mixture import MixtureModel, build_mixture
from src.predictors import build

logger = logging.getLogger(__name__)

FORMAT = "fusionlab-checkpoint"
VERSION = 1
MANIFEST = "checkpoint.json"
PAYLOAD = "checkpoint.bin"


def model_layers(model):
    return model.layer_list()


def save_checkpoint(model, out_dir, seed=None, step=0):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    params = [(name, value) for layer in model_layers(model) for name, value, _ in layer.named_parameters()]
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "model_type": "mixture" if isinstance(model, MixtureModel) else "predictor",
        "spec": model.spec.to_dict(),
        "tau": model.tau if isinstance(model, MixtureModel) else None,
        "seed": seed,
        "step": int(step),
        "dtype": "<f4",
        "parameters": [{"name": name, "shape": list(value.shape)} for name, value in params],
    }
    payload = b"".join(np.ascontiguousarray(value, dtype="<f4").tobytes() for _, value in params)
    (out_dir / PAYLOAD).write_bytes(payload)
    (out_dir / MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n")
    logger.info("checkpoint with %d parameters written to %s", sum(v.size for _, v in params), out_dir)
    return out_dir / MANIFEST


def load_checkpoint(out_dir):
    """Rebuild the model described by the manifest and fill it from the payload."""
    out_dir = Path(out_dir)
    manifest_path = out_dir / MANIFEST
    if not manifest_path.exists():
        raise FileNotFoundError(f"checkpoint manifest not found: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != FORMAT or manifest.get("version") != VERSION:
        raise FusionLabError(f"{manifest_path}: not a version-{VERSION} {FORMAT}")

    spec_data = dict(manifest["spec"])
    rng = np.random.default_rng(0)
    if manifest["model_type"] == "mixture":
        spec_data.pop("kind", None)
        model = build_mixture(MixtureSpec(**spec_data), rng, tau=manifest["tau"])
    else:
        model = build(PredictorSpec.from_dict(spec_data), rng)

    values = np.frombuffer((out_dir / PAYLOAD).read_bytes(), dtype="<f4")
    offset = 0
    params = [(name, value) for layer in model_layers(model) for name, value, _ in layer.named_parameters()]
    if [p["name"] for p in manifest["parameters"]] != [name for name, _ in params]:
        raise ShapeError(f"{manifest_path}: parameter manifest does not match the {manifest['model_type']} layout")
    for entry, (name, value) in zip(manifest["parameters"], params):
        if list(value.shape) != entry["shape"]:
            raise ShapeError(f"{name}: manifest shape {entry['shape']} != model shape {list(value.shape)}")
        size = value.size
        if offset + size > values.size:
            raise ShapeError(f"{out_dir / PAYLOAD}: payload ends before parameter {name}")
        value[...] = values[offset:offset + size].reshape(value.shape)
        offset += size
    if offset != values.size:
        raise ShapeError(f"{out_dir / PAYLOAD}: {values.size - offset} trailing values")
    return model, manifest
