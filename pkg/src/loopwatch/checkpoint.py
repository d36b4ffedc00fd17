"""Self-describing model archives: format version, kind, config, config hash, named weights."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from pathlib import Path

import torch

from .cfam import Cebgan, CfamConfig
from .errors import CheckpointError
from .sfam.model import ActionCritic, SfamConfig
from .sfam.prednet import PredNet

FORMAT_VERSION = "loopwatch-checkpoint/1"
STAGES = ("stage1", "stage2")


def config_hash(config) -> str:
    items = dataclasses.asdict(config)
    blob = json.dumps(items, sort_keys=True, default=list)
    return hashlib.sha256(blob.encode()).hexdigest()


def _weights(module: torch.nn.Module) -> dict:
    return {k: v.detach().clone().contiguous() for k, v in module.state_dict().items()}


def _save(path, kind: str, config, weights: dict, **extra) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    archive = {"format_version": FORMAT_VERSION, "kind": kind,
               "config": dataclasses.asdict(config), "config_hash": config_hash(config),
               "weights": weights, **extra}
    torch.save(archive, path)
    return path


def _load(path, kind: str) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"missing checkpoint {path}")
    try:
        archive = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises several unrelated types for corrupt files
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if not isinstance(archive, dict) or archive.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: not a {FORMAT_VERSION} archive")
    if archive.get("kind") != kind:
        raise CheckpointError(f"{path}: holds a {archive.get('kind')} model, expected {kind}")
    return archive


def _config(cls, archive: dict, path, expected):
    try:
        config = cls(**archive["config"])
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: bad config ({exc})") from None
    stored = archive.get("config_hash")
    if stored != config_hash(config):
        raise CheckpointError(f"{path}: config hash does not match the stored config")
    if expected is not None and config_hash(expected) != stored:
        raise CheckpointError(f"{path}: checkpoint config differs from the expected config")
    return config


def _restore(module: torch.nn.Module, weights: dict, path):
    try:
        module.load_state_dict(weights, strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: weights do not fit the config ({exc})") from None
    module.eval()
    return module


def save_cfam(model: Cebgan, path) -> Path:
    return _save(path, "cfam", model.config, _weights(model))


def load_cfam(path, expected: CfamConfig | None = None) -> Cebgan:
    archive = _load(path, "cfam")
    config = _config(CfamConfig, archive, path, expected)
    return _restore(Cebgan(config), archive["weights"], path)


def save_sfam(predictor: PredNet, config: SfamConfig, path, stage: str = "stage2",
              critic: ActionCritic | None = None) -> Path:
    if stage not in STAGES:
        raise ValueError(f"stage must be one of {STAGES}, got {stage!r}")
    extra = {"stage": stage}
    if critic is not None:
        extra["critic"] = _weights(critic)
    return _save(path, "sfam", config, _weights(predictor), **extra)


def load_sfam(path, expected: SfamConfig | None = None, with_critic: bool = False):
    """Return ``(predictor, config, stage)`` or, with ``with_critic``, also the critic."""
    archive = _load(path, "sfam")
    config = _config(SfamConfig, archive, path, expected)
    stage = archive.get("stage")
    if stage not in STAGES:
        raise CheckpointError(f"{path}: unknown stage tag {stage!r}")
    predictor = _restore(config.build_predictor(), archive["weights"], path)
    if not with_critic:
        return predictor, config, stage
    critic = None
    if "critic" in archive:
        critic = _restore(ActionCritic(config), archive["critic"], path)
    return predictor, config, stage, critic
