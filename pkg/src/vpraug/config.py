"""Run configuration: a nested key-value document, loadable from YAML, with
every key overridable by a dotted-name command-line flag."""

from __future__ import annotations

import copy
import os
from pathlib import Path

import yaml

from .augment import AugmentConfig
from .backbone import BackboneConfig
from .training import OptimizerConfig, TrainConfig
from .ue_net import UEConfig


class ConfigError(ValueError):
    pass


DEFAULTS: dict = {
    "manifest": "",
    "output_dir": "out",
    "exchange_dir": "",
    "vpr_checkpoint": "",
    "ue_checkpoint": "",
    "seed": 0,
    "tau_pos": 1.0,
    "tau_neg": 0.0,               # 0 -> 2 * tau_pos
    "organization": "real_query_synth_db",
    "renderer": {
        "kind": "oracle",         # oracle | external
        "noise": 0.0,
        "timeout": 60.0,
    },
    "scene": {
        "texture_seed": 0,
        "size_x": 10.0,
        "size_y": 10.0,
        "height": 4.0,
    },
    "backbone": {
        "input_size": 224,
        "channels": 64,
        "descriptor_dim": 512,
        "normalize": True,
    },
    "ue": {
        "bands": 10,
        "rotation_rep": "matrix",
        "plane_depth": 1.0,
        "n_references": 5,
        "fused_dim": 0,           # 0 -> descriptor_dim
        "feat_hidden": 256,
        "out_hidden": 512,
    },
    "train": {
        "vpr": {"lr": 1e-5, "lr_decay": 0.99, "weight_decay": 1e-3, "batch_size": 8},
        "ue": {"lr": 1e-5, "lr_decay": 0.999, "weight_decay": 0.0},
        "patience": 10,
        "max_epochs": 100,
        "ue_epochs": 30,
        "triplet_margin": 0.1,
        "negatives_per_anchor": 5,
    },
    "augment": {
        "m": 20,
        "k": 3,
        "r_t": 0.0,               # 0 -> 0.5 * tau_pos
        "theta_max_deg": 15.0,
        "retention": "keep_all",
        "use_ue": True,
    },
}


def flat_keys(doc: dict, prefix: str = "") -> dict[str, object]:
    out = {}
    for k, v in doc.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flat_keys(v, key + "."))
        else:
            out[key] = v
    return out


def _set_dotted(doc: dict, key: str, value) -> None:
    parts = key.split(".")
    node = doc
    for p in parts[:-1]:
        if p not in node or not isinstance(node[p], dict):
            raise ConfigError(f"unknown config key {key!r}")
        node = node[p]
    leaf = parts[-1]
    if leaf not in node:
        raise ConfigError(f"unknown config key {key!r}")
    current = node[leaf]
    if isinstance(current, bool):
        node[leaf] = str(value).lower() in ("1", "true", "yes", "on")
    elif isinstance(current, int) and not isinstance(current, bool):
        node[leaf] = int(value)
    elif isinstance(current, float):
        node[leaf] = float(value)
    else:
        node[leaf] = str(value)


class RunConfig:
    """Typed view over the configuration document."""

    def __init__(self, doc: dict | None = None):
        self.doc = copy.deepcopy(DEFAULTS)
        if doc:
            self._merge(self.doc, doc)
        env_out = os.environ.get("VPRAUG_OUTPUT_DIR")
        if env_out:
            self.doc["output_dir"] = env_out

    @staticmethod
    def _merge(base: dict, update: dict, prefix: str = "") -> None:
        for k, v in update.items():
            if k not in base:
                raise ConfigError(f"unknown config key {prefix}{k!r}")
            if isinstance(base[k], dict):
                if not isinstance(v, dict):
                    raise ConfigError(f"config key {prefix}{k!r} must be a mapping")
                RunConfig._merge(base[k], v, f"{prefix}{k}.")
            else:
                base[k] = v

    @classmethod
    def load(cls, path=None, overrides: dict[str, object] | None = None) -> "RunConfig":
        doc = {}
        if path:
            with open(path) as f:
                doc = yaml.safe_load(f) or {}
        cfg = cls(doc)
        for key, value in (overrides or {}).items():
            _set_dotted(cfg.doc, key, value)
        return cfg

    def __getitem__(self, dotted: str):
        node = self.doc
        for p in dotted.split("."):
            node = node[p]
        return node

    @property
    def tau_pos(self) -> float:
        return float(self.doc["tau_pos"])

    @property
    def tau_neg(self) -> float:
        v = float(self.doc["tau_neg"])
        return v if v > 0 else 2.0 * self.tau_pos

    @property
    def output_dir(self) -> Path:
        return Path(self.doc["output_dir"])

    def backbone_config(self) -> BackboneConfig:
        b = self.doc["backbone"]
        return BackboneConfig(input_size=b["input_size"], channels=b["channels"],
                              descriptor_dim=b["descriptor_dim"],
                              normalize=b["normalize"])

    def ue_config(self) -> UEConfig:
        u = self.doc["ue"]
        b = self.doc["backbone"]
        fused = u["fused_dim"] or b["descriptor_dim"]
        return UEConfig(descriptor_dim=b["descriptor_dim"], fused_dim=fused,
                        feature_channels=b["channels"], bands=u["bands"],
                        rotation_rep=u["rotation_rep"],
                        plane_depth=u["plane_depth"],
                        n_references=u["n_references"],
                        feat_hidden=u["feat_hidden"], out_hidden=u["out_hidden"])

    def train_config(self) -> TrainConfig:
        t = self.doc["train"]
        return TrainConfig(
            vpr=OptimizerConfig(**t["vpr"]),
            ue=OptimizerConfig(lr=t["ue"]["lr"], lr_decay=t["ue"]["lr_decay"],
                               weight_decay=t["ue"]["weight_decay"]),
            patience=t["patience"], seed=int(self.doc["seed"]),
            triplet_margin=t["triplet_margin"],
            negatives_per_anchor=t["negatives_per_anchor"],
            max_epochs=t["max_epochs"], ue_epochs=t["ue_epochs"])

    def augment_config(self) -> AugmentConfig:
        a = self.doc["augment"]
        return AugmentConfig(m_candidates=a["m"], k_selected=a["k"],
                             translation_radius=(a["r_t"] or None),
                             rotation_max_deg=a["theta_max_deg"],
                             retention=a["retention"], use_ue=a["use_ue"],
                             n_references=self.doc["ue"]["n_references"])

    def scene_spec(self):
        from .renderer import SceneSpec
        s = self.doc["scene"]
        return SceneSpec(size_x=s["size_x"], size_y=s["size_y"],
                         height=s["height"], texture_seed=s["texture_seed"])

    def validate(self, require_manifest: bool = True) -> None:
        if require_manifest:
            m = self.doc["manifest"]
            if not m:
                raise ConfigError("config key 'manifest' is required")
            if not Path(m).exists():
                raise ConfigError(f"manifest path does not exist: {m}")
        if self.tau_pos <= 0:
            raise ConfigError("tau_pos must be positive")
        if self.doc["organization"] not in ("regular", "real_query_synth_db"):
            raise ConfigError(f"unknown organization {self.doc['organization']!r}")
        if self.doc["renderer"]["kind"] not in ("oracle", "external"):
            raise ConfigError(f"unknown renderer {self.doc['renderer']['kind']!r}")
        if self.doc["renderer"]["kind"] == "external" and not self.doc["exchange_dir"]:
            raise ConfigError("external renderer requires exchange_dir")
        # eagerly build typed configs so bounds are checked before side effects
        self.backbone_config()
        self.ue_config()
        self.train_config()
        self.augment_config()
