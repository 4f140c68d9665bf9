"""Whole-pipeline configuration: one JSON document, stage sub-configs."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .assoc import AssocConfig
from .backend.graph import BackendConfig
from .core import CameraRig
from .geometry import IcpConfig
from .postprocess import PostprocessConfig
from .sim import SimConfig, default_rig


@dataclass(frozen=True)
class PipelineConfig:
    assoc: AssocConfig = field(default_factory=AssocConfig)
    icp: IcpConfig = field(default_factory=IcpConfig)
    backend: BackendConfig = field(default_factory=BackendConfig)
    post: PostprocessConfig = field(default_factory=PostprocessConfig)

    def to_dict(self) -> dict:
        return {
            "assoc": self.assoc.to_dict(),
            "icp": self.icp.to_dict(),
            "backend": self.backend.to_dict(),
            "post": self.post.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        return cls(
            assoc=AssocConfig.from_dict(d.get("assoc", {})),
            icp=IcpConfig.from_dict(d.get("icp", {})),
            backend=BackendConfig.from_dict(d.get("backend", {})),
            post=PostprocessConfig.from_dict(d.get("post", {})),
        )


@dataclass(frozen=True)
class ConfigBundle:
    """Everything a run needs: camera rig, stage configs, simulator."""

    rig: CameraRig = field(default_factory=default_rig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    sim: SimConfig = field(default_factory=SimConfig)

    def to_dict(self) -> dict:
        d = {"rig": self.rig.to_dict()}
        d.update(self.pipeline.to_dict())
        d["sim"] = self.sim.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ConfigBundle":
        rig = CameraRig.from_dict(d["rig"]) if "rig" in d else default_rig()
        if "assoc" in d:
            assoc = AssocConfig.from_dict(d["assoc"])
        else:
            assoc = AssocConfig.for_rig_width(rig.width_px)
        pipeline = PipelineConfig(
            assoc=assoc,
            icp=IcpConfig.from_dict(d.get("icp", {})),
            backend=BackendConfig.from_dict(d.get("backend", {})),
            post=PostprocessConfig.from_dict(d.get("post", {})),
        )
        sim_dict = dict(d.get("sim", {}))
        if "rig" not in sim_dict:
            sim_dict["rig"] = rig.to_dict()
        return cls(rig=rig, pipeline=pipeline, sim=SimConfig.from_dict(sim_dict))


def load_config(path) -> ConfigBundle:
    with open(path, "r", encoding="utf-8") as fh:
        return ConfigBundle.from_dict(json.load(fh))


def save_config(bundle: ConfigBundle, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(bundle.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
