"""Four-branch localization network.

BR1 (conv backbone) embeds the object crop, BR2 encodes the normalized 2D box;
their concatenation is the semantic vector shared by the BEV head (BR3) and
the 3D target head (BR4).
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import DegenerateYaw, ShapeMismatch, UnknownBranch
from .geometry import (
    H_CENTER,
    L_CENTER,
    W_CENTER,
    BevRect,
    Box3D,
    TargetVector,
    canonicalize_rect,
    denormalize_targets,
)
from .nn import GradCheckResult, LayerSpec, Sequential, Tensor, check_gradients, mse_loss


BRANCHES = ("br1", "br2", "br3", "br4")
ENCODING_DIM = 256
# smallest exported box side, in meters; survives two-decimal label text
MIN_DIMENSION = 0.05


@dataclass
class BranchConfig:
    feature_dim: int = 32
    crop_size: int = 32
    backbone_channels: List[int] = field(default_factory=lambda: [8, 16])
    br2_widths: List[int] = field(default_factory=lambda: [64, 128, 256, 256])
    br3_widths: List[int] = field(default_factory=lambda: [128, 128, 64, 64, 32, 32, 16, 4])
    br4_widths: List[int] = field(default_factory=lambda: [128, 128, 64, 64, 32, 32, 16, 8])
    out_dim: int = 8
    dropout_p: float = 0.25
    backbone_trainable: bool = True

    def __post_init__(self) -> None:
        self.backbone_channels = [int(c) for c in self.backbone_channels]
        self.br2_widths = [int(w) for w in self.br2_widths]
        self.br3_widths = [int(w) for w in self.br3_widths]
        self.br4_widths = [int(w) for w in self.br4_widths]
        if self.out_dim not in (7, 8):
            raise ValueError(f"out_dim must be 7 or 8, got {self.out_dim}")
        if len(self.br4_widths) == 8 and self.br4_widths[-1] != self.out_dim:
            self.br4_widths[-1] = self.out_dim
        if len(self.br2_widths) != 4 or self.br2_widths[-1] != ENCODING_DIM:
            raise ValueError(f"br2_widths must be 4 layers ending at {ENCODING_DIM}")
        if len(self.br3_widths) != 8 or self.br3_widths[-1] != 4:
            raise ValueError("br3_widths must be 8 layers ending at 4")
        if len(self.br4_widths) != 8:
            raise ValueError("br4_widths must be 8 layers")
        if len(self.backbone_channels) != 2 or self.feature_dim <= 0:
            raise ValueError("backbone needs two intermediate channel counts and a positive feature_dim")
        if self.crop_size <= 0 or self.crop_size % 8:
            raise ValueError(f"crop_size must be a positive multiple of 8, got {self.crop_size}")
        if not (0.0 <= self.dropout_p < 1.0):
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")


def _backbone_specs(cfg: BranchConfig) -> List[LayerSpec]:
    specs: List[LayerSpec] = []
    for ch in (*cfg.backbone_channels, cfg.feature_dim):
        specs += [LayerSpec("conv3x3", ch), LayerSpec("relu"), LayerSpec("avgpool2")]
    return specs + [LayerSpec("globalavgpool")]


def _mlp_specs(widths: Sequence[int], dropout_p: float, head: Optional[str]) -> List[LayerSpec]:
    specs: List[LayerSpec] = []
    for i, w in enumerate(widths):
        specs.append(LayerSpec("dense", w))
        if i < len(widths) - 1:
            specs.append(LayerSpec("relu"))
            if dropout_p > 0:
                specs.append(LayerSpec("dropout", dropout_p=dropout_p))
        elif head is not None:
            specs.append(LayerSpec(head))
    return specs


@dataclass
class ModelOutput:
    bev: Optional[np.ndarray] = None  # (N, 4) raw tanh corners
    target: Optional[np.ndarray] = None  # (N, out_dim)


class BranchModel:
    checkpoint_kind = "branches"

    def __init__(self, cfg: Optional[BranchConfig] = None, rng: Optional[np.random.Generator] = None) -> None:
        self.cfg = cfg or BranchConfig()
        c = self.cfg
        semantic = (c.feature_dim + ENCODING_DIM,)
        self.branches: Dict[str, Sequential] = {
            "br1": Sequential((1, c.crop_size, c.crop_size), _backbone_specs(c), rng),
            "br2": Sequential((4,), _mlp_specs(c.br2_widths, 0.0, None), rng),
            "br3": Sequential(semantic, _mlp_specs(c.br3_widths, c.dropout_p, "tanh"), rng),
            "br4": Sequential(semantic, _mlp_specs(c.br4_widths, c.dropout_p, "tanh"), rng),
        }

    def _branch(self, branch: str) -> Sequential:
        key = branch.lower()
        if key not in self.branches:
            raise UnknownBranch(f"unknown branch {branch!r}; expected one of {BRANCHES}")
        return self.branches[key]

    def set_trainable(self, branch: str, flag: bool) -> None:
        self._branch(branch).set_trainable(flag)

    def trainable(self, branch: str) -> bool:
        return self._branch(branch).trainable

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        return [(f"{b}.{n}", t) for b in BRANCHES for n, t in self.branches[b].named_parameters()]

    def zero_grad(self) -> None:
        for net in self.branches.values():
            net.zero_grad()

    def relu_patterns(self) -> List[np.ndarray]:
        return [p for b in BRANCHES for p in self.branches[b].relu_patterns()]

    # frozen branches always run in eval mode so their outputs are fixed references
    def _train(self, branch: str, train: bool) -> bool:
        return train and self.branches[branch].trainable

    def backbone_forward(self, crops: np.ndarray, train: bool = False, rng=None) -> np.ndarray:
        crops = np.asarray(crops, dtype=np.float64)
        if crops.ndim == 3:
            crops = crops[:, None]
        return self.branches["br1"].forward(crops, self._train("br1", train), rng)

    def br2_forward(self, bboxes: np.ndarray, train: bool = False, rng=None) -> np.ndarray:
        return self.branches["br2"].forward(bboxes, self._train("br2", train), rng)

    def br3_forward(self, semantic: np.ndarray, train: bool = False, rng=None) -> np.ndarray:
        return self.branches["br3"].forward(semantic, self._train("br3", train), rng)

    def br4_forward(self, semantic: np.ndarray, train: bool = False, rng=None) -> np.ndarray:
        return self.branches["br4"].forward(semantic, self._train("br4", train), rng)

    def forward(
        self,
        crops: np.ndarray,
        bboxes: np.ndarray,
        train: bool = False,
        rng: Optional[np.random.Generator] = None,
        heads: Sequence[str] = ("bev", "target"),
    ) -> ModelOutput:
        sem = semantic_concat(
            self.backbone_forward(crops, train, rng), self.br2_forward(bboxes, train, rng)
        )
        out = ModelOutput()
        if "bev" in heads:
            out.bev = self.br3_forward(sem, train, rng)
        if "target" in heads:
            out.target = self.br4_forward(sem, train, rng)
        return out

    def backward(self, d_bev: Optional[np.ndarray] = None, d_target: Optional[np.ndarray] = None) -> None:
        upstream = self.trainable("br1") or self.trainable("br2")
        d_sem = None
        for key, dy in (("br3", d_bev), ("br4", d_target)):
            if dy is None or not (upstream or self.trainable(key)):
                continue
            g = self.branches[key].backward(dy)
            d_sem = g if d_sem is None else d_sem + g
        if d_sem is None or not upstream:
            return
        d = self.cfg.feature_dim
        if self.trainable("br1"):
            self.branches["br1"].backward(d_sem[:, :d].reshape(d_sem.shape[0], d))
        if self.trainable("br2"):
            self.branches["br2"].backward(d_sem[:, d:])

    def branch_blob(self, branches: Sequence[str]) -> bytes:
        """Raw float64 bytes of the named branches' parameters, in manifest order."""
        parts = []
        for b in branches:
            for _, t in self._branch(b).named_parameters():
                parts.append(np.ascontiguousarray(t.values, dtype="<f8").tobytes())
        return b"".join(parts)

    def branch_digest(self, branches: Sequence[str]) -> str:
        return hashlib.sha256(self.branch_blob(branches)).hexdigest()

    def predict(
        self, crops: np.ndarray, bboxes: np.ndarray, batch_size: int = 256
    ) -> Tuple[List[BevRect], List[Box3D]]:
        rects: List[BevRect] = []
        boxes: List[Box3D] = []
        for start in range(0, len(crops), batch_size):
            out = self.forward(crops[start:start + batch_size], bboxes[start:start + batch_size])
            rects += [canonicalize_rect(row) for row in out.bev]
            boxes += [decode_box(row) for row in out.target]
        return rects, boxes

    def config(self) -> dict:
        return asdict(self.cfg)

    @classmethod
    def from_config(cls, config: dict) -> "BranchModel":
        return cls(BranchConfig(**config))


def semantic_concat(feature: np.ndarray, encoding: np.ndarray) -> np.ndarray:
    """Feature first, box encoding second."""
    if feature.ndim != 2 or encoding.ndim != 2 or feature.shape[0] != encoding.shape[0]:
        raise ShapeMismatch(f"cannot concatenate {feature.shape} and {encoding.shape}")
    if encoding.shape[1] != ENCODING_DIM:
        raise ShapeMismatch(f"box encoding must have {ENCODING_DIM} values, got {encoding.shape[1]}")
    return np.concatenate([feature, encoding], axis=1)


def targets_for(targets8: np.ndarray, out_dim: int) -> np.ndarray:
    """Training targets for a BR4 head of width ``out_dim`` (7 packs yaw as yaw/pi)."""
    if out_dim == 8:
        return targets8
    yaw = np.arctan2(targets8[:, 6], targets8[:, 7]) / math.pi
    return np.concatenate([targets8[:, :6], yaw[:, None]], axis=1)


def decode_box(row: Sequence[float]) -> Box3D:
    vals = [float(v) for v in row]
    if len(vals) == 7:
        yaw = vals[6] * math.pi
        vals = vals[:6] + [math.sin(yaw), math.cos(yaw)]
    # saturated tanh outputs would decode to boxes that export as 0.00 m
    floors = [MIN_DIMENSION / c - 1.0 for c in (W_CENTER, L_CENTER, H_CENTER)]
    vals[3:6] = [max(v, lo) for v, lo in zip(vals[3:6], floors)]
    t = TargetVector.from_array(vals)
    try:
        return denormalize_targets(t)
    except DegenerateYaw:
        return denormalize_targets(TargetVector.from_array(vals[:6] + [0.0, 1.0]))


def composite_grad_check(
    model: BranchModel,
    crops: np.ndarray,
    bboxes: np.ndarray,
    bev_target: np.ndarray,
    target: np.ndarray,
    eps: float = 1e-5,
    max_params: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> GradCheckResult:
    """Gradient check of both heads through the shared semantic vector."""

    def objective(with_grad: bool) -> float:
        out = model.forward(crops, bboxes, train=False)
        l_bev, g_bev = mse_loss(out.bev, bev_target)
        l_tgt, g_tgt = mse_loss(out.target, target)
        if with_grad:
            model.zero_grad()
            model.backward(d_bev=g_bev, d_target=g_tgt)
        return l_bev + l_tgt

    return check_gradients(objective, model.named_parameters(), model.relu_patterns, eps, max_params, rng)
