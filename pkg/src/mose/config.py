"""Model/training configuration and strict JSON (de)serialization.

Unknown keys anywhere in the document are hard errors: a silently ignored
typo in a hyperparameter name is the classic reproducibility killer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .errors import UsageError
from .losses import LossWeights
from .moe import MoeConfig


@dataclass(frozen=True)
class AttentionSettings:
    window_size: int = 8
    heads: int = 6
    pe_rpe: bool = True
    pe_logcpb: bool = False
    pe_lepe: bool = True
    cpb_hidden: int = 256
    cosine: bool = True


@dataclass(frozen=True)
class TrainSettings:
    lr: float = 1e-4
    batch_size: int = 8
    ckpt_every: int = 100


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 4
    embed_dim: int = 90
    groups: int = 4
    blocks_per_group: int = 6
    scale: int = 4
    dtype: str = "f32"
    attention: AttentionSettings = field(default_factory=AttentionSettings)
    moe: MoeConfig | None = None  # None -> dense MLP feed-forward (hidden 2*embed_dim)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainSettings = field(default_factory=TrainSettings)

    def __post_init__(self):
        if self.scale not in (2, 3, 4):
            raise UsageError(f"scale must be 2, 3 or 4, got {self.scale}")
        if self.embed_dim % self.attention.heads:
            raise UsageError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.attention.heads}")
        if self.moe is not None and self.moe.channels != self.embed_dim:
            raise UsageError("moe.channels must equal embed_dim")


def default_moe(embed_dim: int, experts: int = 8, active: int = 2,
                hidden: int | None = None, smart_merger: bool = True) -> MoeConfig:
    return MoeConfig(experts=experts, active=active, channels=embed_dim,
                     hidden=hidden, smart_merger=smart_merger)


# ---------------------------------------------------------------------------
# strict dict <-> dataclass plumbing


def _take(d: dict, allowed: dict, where: str) -> dict:
    unknown = set(d) - set(allowed)
    if unknown:
        raise UsageError(f"unknown config key(s) in {where}: {sorted(unknown)}")
    out = {}
    for key, kind in allowed.items():
        if key not in d:
            continue
        val = d[key]
        if kind is float and isinstance(val, int) and not isinstance(val, bool):
            val = float(val)
        if kind is not None and not isinstance(val, kind):
            raise UsageError(f"config key {where}.{key} must be {kind}, got {type(val).__name__}")
        out[key] = val
    return out


def config_from_dict(doc: dict) -> ModelConfig:
    if not isinstance(doc, dict):
        raise UsageError("config document must be a JSON object")
    top = _take(doc, {
        "in_channels": int, "embed_dim": int, "groups": int, "blocks_per_group": int,
        "scale": int, "dtype": str, "attention": dict, "moe": None, "loss": dict,
        "train": dict,
    }, "config")

    kwargs = {k: v for k, v in top.items() if k not in ("attention", "moe", "loss", "train")}
    if "attention" in top:
        kwargs["attention"] = AttentionSettings(**_take(top["attention"], {
            "window_size": int, "heads": int, "pe_rpe": bool, "pe_logcpb": bool,
            "pe_lepe": bool, "cpb_hidden": int, "cosine": bool,
        }, "attention"))
    embed_dim = kwargs.get("embed_dim", ModelConfig.embed_dim)
    moe_doc = top.get("moe", "unset")
    if moe_doc is None:
        kwargs["moe"] = None
    elif moe_doc != "unset":
        if not isinstance(moe_doc, dict):
            raise UsageError("config key moe must be an object or null")
        m = _take(moe_doc, {"experts": int, "active": int, "hidden": None,
                            "smart_merger": bool}, "moe")
        hidden = m.get("hidden")
        if hidden is not None and not isinstance(hidden, int):
            raise UsageError("moe.hidden must be an integer or null")
        kwargs["moe"] = MoeConfig(experts=m.get("experts", 8), active=m.get("active", 2),
                                  channels=embed_dim, hidden=hidden,
                                  smart_merger=m.get("smart_merger", True))
    else:
        kwargs["moe"] = default_moe(embed_dim)
    if "loss" in top:
        kwargs["loss"] = LossWeights(**_take(top["loss"], {
            "alpha": float, "beta": float, "gamma": float}, "loss"))
    if "train" in top:
        kwargs["train"] = TrainSettings(**_take(top["train"], {
            "lr": float, "batch_size": int, "ckpt_every": int}, "train"))
    return ModelConfig(**kwargs)


def config_to_dict(cfg: ModelConfig) -> dict:
    doc = {
        "in_channels": cfg.in_channels,
        "embed_dim": cfg.embed_dim,
        "groups": cfg.groups,
        "blocks_per_group": cfg.blocks_per_group,
        "scale": cfg.scale,
        "dtype": cfg.dtype,
        "attention": {
            "window_size": cfg.attention.window_size,
            "heads": cfg.attention.heads,
            "pe_rpe": cfg.attention.pe_rpe,
            "pe_logcpb": cfg.attention.pe_logcpb,
            "pe_lepe": cfg.attention.pe_lepe,
            "cpb_hidden": cfg.attention.cpb_hidden,
            "cosine": cfg.attention.cosine,
        },
        "moe": None if cfg.moe is None else {
            "experts": cfg.moe.experts,
            "active": cfg.moe.active,
            "hidden": cfg.moe.hidden,
            "smart_merger": cfg.moe.smart_merger,
        },
        "loss": {"alpha": cfg.loss.alpha, "beta": cfg.loss.beta, "gamma": cfg.loss.gamma},
        "train": {"lr": cfg.train.lr, "batch_size": cfg.train.batch_size,
                  "ckpt_every": cfg.train.ckpt_every},
    }
    return doc


def load_config(path: str) -> ModelConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"invalid JSON in {path}: {exc}") from exc
    return config_from_dict(doc)
