"""Persistence: checkpoints, run configs, CSV tables, and JSON reports.

Checkpoints are line-oriented text. Every value is written with
``float.hex`` so a save/load round trip reproduces each parameter
bit-exactly. No artifact carries a timestamp, so reruns with the same
config and seed are byte-identical.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .exceptions import ConfigError
from .model import Model, ModelConfig

CHECKPOINT_MAGIC = "condrep-checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, model: Model, meta: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}"]
    header = {"model_config": model.config.to_dict(), "meta": dict(meta or {})}
    lines.append("header " + json.dumps(header, sort_keys=True))
    for name, p in sorted(model.parameters().items()):
        dims = " ".join(str(d) for d in p.data.shape)
        lines.append(f"tensor {name} {p.data.ndim} {dims}".rstrip())
        flat = p.data.reshape(-1)
        for i in range(0, flat.size, 8):
            lines.append(" ".join(v.hex() for v in flat[i:i + 8]))
    lines.append("end")
    path.write_text("\n".join(lines) + "\n")


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray], dict]:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or not lines[0].startswith(CHECKPOINT_MAGIC):
        raise ConfigError(f"checkpoint: {path} is not a {CHECKPOINT_MAGIC} file")
    version = int(lines[0].split()[1])
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"checkpoint: unsupported version {version}")
    if not lines[1].startswith("header "):
        raise ConfigError("checkpoint: missing header line")
    header = json.loads(lines[1][len("header "):])
    config = ModelConfig.from_dict(header["model_config"])
    params: dict[str, np.ndarray] = {}
    i = 2
    while i < len(lines) and lines[i] != "end":
        parts = lines[i].split()
        if parts[0] != "tensor":
            raise ConfigError(f"checkpoint: unexpected line {i + 1}: {lines[i][:40]}")
        name, ndim = parts[1], int(parts[2])
        shape = tuple(int(d) for d in parts[3:3 + ndim])
        count = int(np.prod(shape)) if shape else 1
        values: list[float] = []
        i += 1
        while len(values) < count:
            values.extend(float.fromhex(tok) for tok in lines[i].split())
            i += 1
        params[name] = np.array(values, dtype=np.float64).reshape(shape)
    return config, params, header["meta"]


def model_from_checkpoint(path) -> tuple[Model, dict]:
    config, params, meta = load_checkpoint(path)
    model = Model.init(config, seed=0)
    model.load_parameters(params)
    return model, meta


# ---------------------------------------------------------------------------
# run config: plain key=value text with CLI-flag overrides
# ---------------------------------------------------------------------------

# reference-setup defaults where one exists: batch 80, lr 1e-3, weight decay 0.05,
# 600 episodes, 15 queries per class; the 224-pixel input of the full-scale
# setup is replaced by the 32-pixel toy default.
DEFAULT_CONFIG: dict[str, str] = {
    "n_classes": "5",
    "support_per_class": "20",
    "query_per_class": "60",
    "image_size": "32",
    "blur_fraction": "0.05",
    "mix_camouflaged": "0.25",
    "mix_small": "0.25",
    "mix_incomplete": "0.25",
    "mix_blurry_noisy": "0.25",
    "feature_channels": "32",
    "feature_side": "4",
    "kernel_shape": "3,3,3,3",
    "structure": "siamese",
    "epochs": "50",
    "batch_size": "80",
    "batches_per_epoch": "12",
    "learning_rate": "0.001",
    "weight_decay": "0.05",
    "lr_drop_every": "20",
    "lr_drop_factor": "0.5",
    "loss_variant": "standard",
    "margin": "1.0",
    "epsilon": "1e-8",
    "augment": "randaugment",
    "n_way": "5",
    "k_shot": "1",
    "q_per_class": "15",
    "episodes": "600",
    "strategies": "weighted_query",
    "checkpoint_every": "10",
    "seed": "0",
}


def parse_config_file(path) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"config: line {lineno} is not key=value: '{raw}'")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def resolve_config(file_path=None, overrides: dict | None = None) -> dict[str, str]:
    """defaults < config file < explicit overrides."""
    cfg = dict(DEFAULT_CONFIG)
    if file_path:
        for key, value in parse_config_file(file_path).items():
            if key not in DEFAULT_CONFIG:
                raise ConfigError(f"config: unknown key '{key}'")
            cfg[key] = value
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in DEFAULT_CONFIG:
            raise ConfigError(f"config: unknown key '{key}'")
        cfg[key] = str(value)
    return cfg


def config_hash(cfg: dict[str, str]) -> str:
    canon = "\n".join(f"{k}={cfg[k]}" for k in sorted(cfg))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def dataset_config_from(cfg: dict[str, str]):
    from .data import DatasetConfig
    return DatasetConfig(
        n_classes=int(cfg["n_classes"]),
        support_per_class=int(cfg["support_per_class"]),
        query_per_class=int(cfg["query_per_class"]),
        image_size=int(cfg["image_size"]),
        seed=int(cfg["seed"]),
        transform_mix={
            "camouflaged": float(cfg["mix_camouflaged"]),
            "small": float(cfg["mix_small"]),
            "incomplete": float(cfg["mix_incomplete"]),
            "blurry_noisy": float(cfg["mix_blurry_noisy"]),
        },
        blur_fraction=float(cfg["blur_fraction"]),
    )


def model_config_from(cfg: dict[str, str]) -> ModelConfig:
    from .backbone import BackboneConfig
    size = int(cfg["image_size"])
    side = int(cfg["feature_side"])
    channels = int(cfg["feature_channels"])
    n_blocks = int(np.log2(size // side))
    if side * 2 ** n_blocks != size:
        raise ConfigError(f"config: image_size {size} cannot reach feature_side {side} "
                          f"with stride-2 blocks")
    widths = [max(8, channels // 2 ** (n_blocks - 1 - i)) for i in range(n_blocks)]
    widths[-1] = channels
    backbone = BackboneConfig(input_size=size, channels_in=1,
                              blocks=tuple((w, 2) for w in widths),
                              feature_channels=channels, feature_side=side)
    kernel_shape = tuple(int(x) for x in cfg["kernel_shape"].split(","))
    return ModelConfig(backbone=backbone, kernel_shape=kernel_shape,
                       structure=cfg["structure"])


def train_config_from(cfg: dict[str, str]):
    from .training import LossConfig, TrainConfig
    return TrainConfig(
        epochs=int(cfg["epochs"]),
        batch_size=int(cfg["batch_size"]),
        batches_per_epoch=int(cfg["batches_per_epoch"]),
        learning_rate=float(cfg["learning_rate"]),
        weight_decay=float(cfg["weight_decay"]),
        lr_drop_every=int(cfg["lr_drop_every"]),
        lr_drop_factor=float(cfg["lr_drop_factor"]),
        augment=cfg["augment"],
        loss=LossConfig(variant=cfg["loss_variant"], margin=float(cfg["margin"]),
                        epsilon=float(cfg["epsilon"])),
    )


# ---------------------------------------------------------------------------
# CSV and report writers
# ---------------------------------------------------------------------------

def write_loss_csv(path, losses) -> None:
    lines = ["epoch,mean_loss"]
    lines.extend(f"{i},{loss!r}" for i, loss in enumerate(losses))
    Path(path).write_text("\n".join(lines) + "\n")


def read_loss_csv(path) -> list[tuple[int, float]]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != "epoch,mean_loss":
        raise ConfigError(f"loss csv: bad header in {path}")
    out = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            epoch, loss = line.split(",")
            out.append((int(epoch), float(loss)))
        except ValueError:
            raise ConfigError(f"loss csv: malformed line {lineno}: '{line}'")
    return out


def write_accuracy_csv(path, reports: dict) -> None:
    """Per-episode accuracies, one column per strategy, shared episode rows."""
    names = sorted(reports)
    lines = ["episode," + ",".join(names)]
    n = max((r.n_episodes for r in reports.values()), default=0)
    for i in range(n):
        row = [str(i)]
        row.extend(repr(reports[s].per_episode_accuracy[i]) for s in names)
        lines.append(",".join(row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_accuracy_csv(path) -> dict[str, list[float]]:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("episode,"):
        raise ConfigError(f"accuracy csv: bad header in {path}")
    names = lines[0].split(",")[1:]
    if not names or len([l for l in lines[1:] if l.strip()]) == 0:
        raise ConfigError(f"accuracy csv: no data rows in {path}")
    out: dict[str, list[float]] = {name: [] for name in names}
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != len(names) + 1:
            raise ConfigError(f"accuracy csv: malformed line {lineno}: '{line}'")
        try:
            for name, val in zip(names, parts[1:]):
                out[name].append(float(val))
        except ValueError:
            raise ConfigError(f"accuracy csv: malformed line {lineno}: '{line}'")
    return out


def write_report_json(path, reports: dict, run_config: dict | None = None) -> None:
    payload = {
        "strategies": {
            name: {
                "mean": r.mean,
                "ci95": r.ci95,
                "n_episodes": r.n_episodes,
                "per_episode_accuracy": r.per_episode_accuracy,
                "config": r.config,
            } for name, r in reports.items()
        },
        "run_config": dict(run_config or {}),
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")


def write_embeddings_csv(path, rows, channels: int) -> None:
    """rows: iterable of (sample_id, class_id, pool, rep_vector, backbone_vector)."""
    header = ["sample_id", "class_id", "pool"]
    header += [f"rep_{i}" for i in range(channels)]
    header += [f"backbone_{i}" for i in range(channels)]
    lines = [",".join(header)]
    for sample_id, class_id, pool, rep, base in rows:
        parts = [str(sample_id), str(class_id), pool]
        parts.extend(repr(float(v)) for v in rep)
        parts.extend(repr(float(v)) for v in base)
        lines.append(",".join(parts))
    Path(path).write_text("\n".join(lines) + "\n")
