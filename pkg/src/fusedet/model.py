"""Pipeline parameter container, seeded initialization, and checkpoints."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .detector import StageHeads, VoxelGridConfig
from .hpr import HprConfig, HprParams, create_hpr_params
from .mlp import Mlp

CHECKPOINT_MAGIC = b"FDCK"
CHECKPOINT_VERSION = 1


@dataclass
class NetConfig:
    """Widths and grids for every network in the pipeline."""

    voxel: VoxelGridConfig = field(default_factory=VoxelGridConfig)
    pseudo_voxel: VoxelGridConfig = field(
        default_factory=lambda: VoxelGridConfig(voxel_size=(0.2, 0.2, 0.15))
    )
    hpr: HprConfig = field(default_factory=HprConfig)
    pool_g: int = 6
    psw_samples: int = 6
    vox_width: int = 16
    vox_hidden: int = 16
    head_hidden: int = 64
    aux_hidden: int = 32
    fusion_hidden: int = 128
    fusion_width: int = 128
    crop_margin: float = 0.5

    @property
    def lidar_roi_width(self) -> int:
        return self.pool_g**3 * self.vox_width

    @property
    def pseudo_roi_width(self) -> int:
        return self.pool_g**3 * self.hpr.out_width


@dataclass
class PipelineParams:
    """All learnable tensors, grouped by subnetwork."""

    vox_mlp: Mlp
    heads1: StageHeads
    hpr: HprParams
    fusion: Mlp
    heads2: StageHeads
    aux_lidar: StageHeads
    aux_pseudo: StageHeads

    def named_params(self) -> dict:
        out = {}
        out.update(self.vox_mlp.named_params("vox"))
        out.update(self.heads1.named_params("heads1"))
        out.update(self.hpr.named_params("hpr"))
        out.update(self.fusion.named_params("fusion"))
        out.update(self.heads2.named_params("heads2"))
        out.update(self.aux_lidar.named_params("aux_lidar"))
        out.update(self.aux_pseudo.named_params("aux_pseudo"))
        return out


# effective squared-norm target for wide pooled-feature inputs; keeps the
# first-layer curvature (and so the usable SGD step) independent of fan-in
FAN_IN_TARGET = 256.0


def _fan_in_scale(width: int) -> float:
    return min(1.0, math.sqrt(FAN_IN_TARGET / width))


def _make_heads(in_width: int, hidden: int, rng) -> StageHeads:
    scale = _fan_in_scale(in_width)
    reg = Mlp.create([in_width, hidden, 7], rng, input_scale=scale)
    # small final layer so freshly initialized heads decode near the RoI
    reg.weights[-1] *= 0.02
    reg.biases[-1] *= 0.02
    return StageHeads(
        reg=reg, cls=Mlp.create([in_width, hidden, 1], rng, input_scale=scale)
    )


def create_params(cfg: NetConfig, seed: int = 0) -> PipelineParams:
    rng = np.random.default_rng(seed)
    vox_mlp = Mlp.create([5, cfg.vox_hidden, cfg.vox_width], rng)
    heads1 = _make_heads(cfg.lidar_roi_width, cfg.head_hidden, rng)
    hpr = create_hpr_params(cfg.hpr, rng)
    fusion_in = cfg.pseudo_roi_width + cfg.lidar_roi_width
    fusion = Mlp.create(
        [fusion_in, cfg.fusion_hidden, cfg.fusion_width],
        rng, input_scale=_fan_in_scale(fusion_in),
    )
    heads2 = _make_heads(cfg.fusion_width, cfg.head_hidden, rng)
    aux_lidar = _make_heads(cfg.lidar_roi_width, cfg.aux_hidden, rng)
    aux_pseudo = _make_heads(cfg.pseudo_roi_width, cfg.aux_hidden, rng)
    return PipelineParams(
        vox_mlp=vox_mlp, heads1=heads1, hpr=hpr, fusion=fusion,
        heads2=heads2, aux_lidar=aux_lidar, aux_pseudo=aux_pseudo,
    )


# ---------------------------------------------------------------------------
# config (de)serialization


def net_config_to_dict(cfg: NetConfig) -> dict:
    return asdict(cfg)


def net_config_from_dict(d: dict) -> NetConfig:
    d = dict(d)
    d["voxel"] = VoxelGridConfig(
        voxel_size=tuple(d["voxel"]["voxel_size"]),
        extent=tuple(tuple(p) for p in d["voxel"]["extent"]),
    )
    d["pseudo_voxel"] = VoxelGridConfig(
        voxel_size=tuple(d["pseudo_voxel"]["voxel_size"]),
        extent=tuple(tuple(p) for p in d["pseudo_voxel"]["extent"]),
    )
    hpr = dict(d["hpr"])
    hpr["step_widths"] = tuple(hpr["step_widths"])
    hpr["attr_scale"] = tuple(hpr["attr_scale"])
    d["hpr"] = HprConfig(**hpr)
    return NetConfig(**d)


# ---------------------------------------------------------------------------
# checkpoint blob: magic, version, config echo, tensors in sorted-name order


def save_checkpoint(path, params: PipelineParams, cfg: NetConfig):
    tensors = params.named_params()
    blob = json.dumps(net_config_to_dict(cfg), sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.asarray(tensors[name], dtype=np.float64)
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.astype("<f8").tobytes())


def load_checkpoint(path):
    """Load (params, cfg); tensor names/shapes must match the echoed config."""
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    off = 4
    (version,) = struct.unpack_from("<I", raw, off)
    off += 4
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (blob_len,) = struct.unpack_from("<I", raw, off)
    off += 4
    cfg = net_config_from_dict(json.loads(raw[off : off + blob_len].decode("utf-8")))
    off += blob_len
    (n_tensors,) = struct.unpack_from("<I", raw, off)
    off += 4
    params = create_params(cfg, seed=0)
    tensors = params.named_params()
    seen = set()
    for _ in range(n_tensors):
        (name_len,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off : off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<I", raw, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape)
        off += count * 8
        if name not in tensors:
            raise ValueError(f"{path}: unknown tensor {name!r}")
        if tensors[name].shape != data.shape:
            raise ValueError(
                f"{path}: tensor {name!r} shape {data.shape} != {tensors[name].shape}"
            )
        tensors[name][...] = data
        seen.add(name)
    missing = set(tensors) - seen
    if missing:
        raise ValueError(f"{path}: checkpoint missing tensors {sorted(missing)[:3]}...")
    return params, cfg
