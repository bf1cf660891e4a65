"""Checkpoint and dataset-cache serialization on the binary container."""

from __future__ import annotations

from dataclasses import asdict

import numpy as np

from .container import read_container, write_container
from .data import NormStats, RecordSet, Schema
from .errors import ContractError, IngestError
from .model import HSTTN, ModelConfig
from .training import Checkpoint, TrainConfig


def _config_to_dict(cfg: ModelConfig) -> dict:
    d = asdict(cfg)
    d["pool_factors"] = list(cfg.pool_factors)
    return d


def _config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    d["pool_factors"] = tuple(d["pool_factors"])
    return ModelConfig(**d)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    header = {
        "kind": "checkpoint",
        "model_config": _config_to_dict(ckpt.model_config),
        "train_config": asdict(ckpt.train_config),
        "epoch": ckpt.epoch,
        "val_loss": ckpt.val_loss,
        "schema": ckpt.schema_dict,
    }
    arrays = {f"param.{name}": arr for name, arr in ckpt.parameters.items()}
    arrays["norm.mean"] = ckpt.norm_stats.mean
    arrays["norm.std"] = ckpt.norm_stats.std
    write_container(path, header, arrays)


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> Checkpoint:
    header, arrays = read_container(path)
    if header.get("kind") != "checkpoint":
        raise IngestError(f"{path}: container is not a checkpoint")
    config = _config_from_dict(header["model_config"])
    if expected_config is not None and config != expected_config:
        raise ContractError(
            f"checkpoint config {config} does not match the expected config "
            f"{expected_config}; refusing to load"
        )
    params = {name[len("param."):]: arr for name, arr in arrays.items()
              if name.startswith("param.")}
    stats = NormStats(mean=arrays["norm.mean"], std=arrays["norm.std"])
    return Checkpoint(
        model_config=config,
        parameters=params,
        epoch=int(header["epoch"]),
        val_loss=float(header["val_loss"]),
        norm_stats=stats,
        train_config=TrainConfig(**header["train_config"]),
        schema_dict=header.get("schema", {}),
    )


def model_from_checkpoint(ckpt: Checkpoint) -> HSTTN:
    model = HSTTN(ckpt.model_config)
    model.params.load_arrays(ckpt.parameters)
    return model


def save_dataset(path, rs: RecordSet) -> None:
    header = {
        "kind": "dataset",
        "schema": rs.schema.to_dict(),
        "turbine_ids": list(rs.turbine_ids),
    }
    write_container(path, header, {"values": rs.values, "validity": rs.validity})


def load_dataset(path) -> RecordSet:
    header, arrays = read_container(path)
    if header.get("kind") != "dataset":
        raise IngestError(f"{path}: container is not a dataset cache")
    return RecordSet(
        schema=Schema.from_dict(header["schema"]),
        values=np.asarray(arrays["values"], dtype=np.float64),
        validity=np.asarray(arrays["validity"], dtype=bool),
        turbine_ids=tuple(int(t) for t in header["turbine_ids"]),
    )
