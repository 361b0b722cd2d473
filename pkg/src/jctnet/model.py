"""JCTNet assembly (CFM -> TFM -> CRM) and parameter accounting."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .cfm import CfmConfig, CfmModel, standardize
from .crm import CrmModel, count_from_map
from .nn import Module
from .tensor import Tensor
from .tfm import TfmConfig, TfmModel


@dataclass
class ModelConfig:
    cfm: CfmConfig = field(default_factory=CfmConfig)
    tfm: TfmConfig = field(default_factory=TfmConfig)
    count_reduction: str = "sum"


class JCTNetModel(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.config = cfg
        rng = np.random.default_rng(seed)
        self.cfm = CfmModel(cfg.cfm, rng)
        self.tfm = TfmModel(cfg.tfm, self.cfm.out_channels, rng)
        self.crm = CrmModel(cfg.tfm.embed_dim, rng)

    def stages(self, image: Tensor) -> dict[str, Tensor]:
        """Run all three stages and return ``{'cfm': C_f, 'tfm': T_F, 'crm': map}``."""
        c_f = self.cfm(image)
        t_f = self.tfm(c_f)
        return {"cfm": c_f, "tfm": t_f, "crm": self.crm(t_f)}

    def __call__(self, image: Tensor) -> Tensor:
        """``[B, 3, H, W]`` standardized image to the ``[B, 1, H/8, W/8]`` count map."""
        return self.crm(self.tfm(self.cfm(image)))

    def predict_counts(self, image: Tensor) -> Tensor:
        return count_from_map(self(image), self.config.count_reduction)

    def images_to_tensor(self, pixels: np.ndarray) -> Tensor:
        return Tensor(standardize(pixels), dtype=self.cfm.convs[0].weight.dtype)


def build_model(cfg: ModelConfig, seed: int = 0) -> JCTNetModel:
    if cfg.cfm.out_channels < 1 or cfg.tfm.embed_dim < 4:
        raise ValueError("inconsistent widths: embed_dim must be >= 4 for the CRM halving schedule")
    return JCTNetModel(cfg, seed)


def count_parameters(model: Module, breakdown: bool = True) -> dict[str, int]:
    """Exact element count over named parameters, optionally per top-level stage."""
    counts: dict[str, int] = {}
    total = 0
    for name, p in model.named_parameters():
        total += p.size
        if breakdown:
            stage = name.split(".", 1)[0]
            counts[stage] = counts.get(stage, 0) + p.size
    counts["total"] = total
    return counts


def closed_form_parameter_count(cfg: ModelConfig) -> dict[str, int]:
    """Parameter count from the architecture formulas alone (no model is built)."""
    widths = cfg.cfm.widths
    cfm, cin = 0, 3
    for c in widths:
        cfm += 9 * cin * c + c + 2 * c  # conv weight + bias, BN gamma + beta
        cin = c

    t = cfg.tfm
    d = t.token_dim
    hidden = t.hidden_dim
    k = t.interaction_conv_kernel
    tfm = 9 * widths[-1] * t.embed_dim + t.embed_dim
    for depth, heads in zip(t.depths, t.num_heads):
        per_layer = (
            4 * d  # two LayerNorms
            + 3 * d * d + 3 * d  # qkv
            + d * d + d  # output projection
            + d * hidden + hidden + hidden * d + d  # MLP
        )
        if t.use_relative_position_bias:
            per_layer += (2 * t.window_size - 1) ** 2 * heads
        tfm += depth * per_layer + (depth // 2) * (k * k * d * d + d)

    e = t.embed_dim
    c1, c2 = max(1, e // 2), max(1, e // 4)
    crm = 9 * e * c1 + c1 + 2 * c1 + 9 * c1 * c2 + c2 + 2 * c2 + c2 + 1
    return {"cfm": cfm, "tfm": tfm, "crm": crm, "total": cfm + tfm + crm}


def parameter_digest(model: Module) -> str:
    h = hashlib.sha256()
    for name, arr in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()
