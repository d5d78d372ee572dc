"""Full network assembly and the stage-1 / stage-2 forward paths."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .config import AblationConfig, RunConfig
from .graph import AUBranches, GraphModule
from .interaction import InteractionModule
from .text import TextBranch, TextFeatures, WordPieceTokenizer
from .vision import VisionEncoder, build_backbone

# top-level attribute names grouped by functional module
MODULE_GROUPS = {
    "vision_encoding": ("vision",),
    "au_branch_graph": ("branches", "graph"),
    "text_encoding": ("text",),
    "cross_modal_interaction": ("interaction",),
}


@dataclass
class Stage2Output:
    logits: torch.Tensor
    U: torch.Tensor
    D: torch.Tensor
    C: torch.Tensor
    records: dict


class HiVA(nn.Module):
    def __init__(self, cfg: RunConfig, vocab_size: int | None = None):
        super().__init__()
        m, t = cfg.model, cfg.text
        if vocab_size is None:
            vocab_size = WordPieceTokenizer(cfg.data.vocab).vocab_size
        n = cfg.num_aus
        backbone = build_backbone(m.backbone, m.image_size, m.raw_channels, stages=m.toy_stages,
                                  patch=m.swin.patch, embed_dim=m.swin.embed_dim, depths=m.swin.depths,
                                  heads=m.swin.heads, window=m.swin.window)
        self.vision = VisionEncoder(backbone, m.width)
        self.branches = AUBranches(n, m.width)
        self.graph = GraphModule(n, m.width, min(cfg.graph.k, max(n - 1, 1)))
        self.text = TextBranch(vocab_size, t.width, m.width, t.layers, t.heads, t.max_tokens,
                               t.trainable_layers, t.context_layers, t.context_heads, t.dropout)
        self.interaction = InteractionModule(n, m.width, t.width)

    def group_parameters(self, group: str) -> dict[str, nn.Parameter]:
        prefixes = MODULE_GROUPS[group]
        return {k: p for k, p in self.named_parameters() if k.split(".")[0] in prefixes}

    def visual(self, images: torch.Tensor):
        xg = self.vision(images)
        maps, U = self.branches(xg.values)
        return xg, maps, U

    def forward_stage1(self, images: torch.Tensor) -> dict:
        xg, maps, U = self.visual(images)
        out = self.graph(U)
        out.update(U=U, xg=xg)
        return out

    def forward_stage2(self, images: torch.Tensor, text: TextFeatures | None,
                       ablation: AblationConfig | None = None) -> Stage2Output:
        ablation = ablation or AblationConfig()
        xg, maps, U = self.visual(images)
        records = {}
        zeros = torch.zeros_like(U)
        D = C = zeros
        if not ablation.no_text:
            Z = text.context
            if not ablation.no_ddca:
                D, rec = self.interaction.ddca(U, maps, text.tokens, text.mask, Z)
                records.update(rec)
            if not ablation.no_cdca:
                C, rec = self.interaction.cdca(xg.values, Z)
                records.update(rec)
        logits = self.interaction.fusion(U, D, C)
        return Stage2Output(logits=logits, U=U, D=D, C=C, records=records)


def images_to_tensor(images: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32))


def state_hash(state: dict[str, torch.Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(state):
        t = state[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()
