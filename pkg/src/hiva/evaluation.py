"""F1 scoring, attention / graph exports and model statistics."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch


@dataclass
class ConfusionCounts:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray

    @classmethod
    def from_predictions(cls, pred: np.ndarray, labels: np.ndarray) -> "ConfusionCounts":
        pred = pred.astype(bool)
        y = labels.astype(bool)
        return cls(tp=(pred & y).sum(0), fp=(pred & ~y).sum(0), fn=(~pred & y).sum(0), tn=(~pred & ~y).sum(0))

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)


@dataclass
class F1Report:
    au_ids: list[str]
    f1: list[float]  # percent, unrounded
    threshold: float
    num_samples: int
    precision: list[float] = field(default_factory=list)
    recall: list[float] = field(default_factory=list)

    @property
    def mean_f1(self) -> float:
        return float(sum(self.f1) / len(self.f1)) if self.f1 else 0.0

    def rounded(self) -> dict[str, float]:
        return {**{au: round(v, 1) for au, v in zip(self.au_ids, self.f1)}, "AVE": round(self.mean_f1, 1)}

    def to_dict(self) -> dict:
        return {"au_ids": self.au_ids, "f1": self.f1, "mean_f1": self.mean_f1, "threshold": self.threshold,
                "num_samples": self.num_samples, "precision": self.precision, "recall": self.recall}


def f1_per_au(counts: ConfusionCounts, au_ids: Sequence[str] | None = None, threshold: float = 0.5) -> F1Report:
    """F1 = 2PR/(P+R) per AU, reported x100; degenerate counts score 0."""
    f1s, ps, rs = [], [], []
    for tp, fp, fn in zip(counts.tp.tolist(), counts.fp.tolist(), counts.fn.tolist()):
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f1s.append(100.0 * 2 * p * r / (p + r) if p + r else 0.0)
        ps.append(p)
        rs.append(r)
    n = len(f1s)
    au_ids = list(au_ids) if au_ids is not None else [f"AU{i}" for i in range(n)]
    total = int(counts.tp[0] + counts.fp[0] + counts.fn[0] + counts.tn[0]) if n else 0
    return F1Report(au_ids=au_ids, f1=f1s, threshold=threshold, num_samples=total, precision=ps, recall=rs)


def f1_from_predictions(probs: np.ndarray, labels: np.ndarray, threshold: float = 0.5,
                        au_ids: Sequence[str] | None = None) -> F1Report:
    counts = ConfusionCounts.from_predictions(probs >= threshold, labels)
    return f1_per_au(counts, au_ids, threshold)


# ---------------------------------------------------------------------------
# inference


def text_features(model, cfg, ckpt_hash: str, cache_dir=None, descriptions=None):
    """Canonical text features, from the cache when valid, else recomputed."""
    from .text import cache_text_features, load_text_cache
    from .training import load_descriptions

    if cache_dir is not None:
        cached = load_text_cache(cache_dir, ckpt_hash)
        if cached is not None:
            return cached
    try:
        tokenized = descriptions if descriptions is not None else load_descriptions(cfg)
    except FileNotFoundError as exc:
        raise ValueError(f"no valid text cache and no description set: {exc}") from None
    except ValueError as exc:
        if cache_dir is None:
            raise
        raise ValueError(f"no valid text cache in {cache_dir} and no description set: {exc}") from None
    return cache_text_features(tokenized, model.text, ckpt_hash, cache_dir)


@torch.no_grad()
def predict(model, samples, cfg, text=None, ablation=None, stage1_head: bool = False, batch_size: int = 64,
            return_outputs: bool = False):
    from .model import images_to_tensor

    model.eval()
    probs, outputs = [], []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        images = images_to_tensor(np.stack([s.image for s in chunk]))
        if stage1_head:
            out = model.forward_stage1(images)
            logits = out["logits"]
        else:
            out = model.forward_stage2(images, text, ablation or cfg.ablation)
            logits = out.logits
        probs.append(torch.sigmoid(logits).numpy())
        if return_outputs:
            outputs.append(out)
    probs = np.concatenate(probs) if probs else np.zeros((0, cfg.num_aus), dtype=np.float32)
    return (probs, outputs) if return_outputs else probs


def evaluate(checkpoint, samples, cfg=None, threshold: float | None = None, ablation=None,
             stage1_head: bool = False, cache_dir=None, descriptions=None, use_cache: bool = True) -> F1Report:
    """Score a checkpoint on ``samples``. Stage-2 checkpoints use the fused
    head; ``stage1_head`` scores the graph-refined stage-1 head instead."""
    from .training import load_model

    cfg = cfg or checkpoint.run_config
    threshold = cfg.eval.threshold if threshold is None else threshold
    ablation = ablation or cfg.ablation
    model = load_model(checkpoint, cfg)
    text = None
    if not stage1_head and not ablation.no_text:
        text = text_features(model, cfg, checkpoint.param_hash, cache_dir if use_cache else None, descriptions)
    probs = predict(model, samples, cfg, text, ablation, stage1_head)
    labels = np.stack([s.labels for s in samples])
    return f1_from_predictions(probs, labels, threshold, cfg.data.au_ids)


# ---------------------------------------------------------------------------
# attention maps


def attention_maps(model, samples, cfg, text, batch_size: int = 64) -> dict[str, np.ndarray]:
    """Reverse-DDCA maps ``[S, N, H, W]`` and composite CDCA maps ``[S, H, W]``."""
    _, outs = predict(model, samples, cfg, text, cfg.ablation, batch_size=batch_size, return_outputs=True)
    ddca, cdca = [], []
    for out in outs:
        b = out.U.shape[0]
        if "DDCA_t2v" in out.records:
            ddca.append(out.records["DDCA_t2v"].weights.numpy())
        if "CDCA_t2v" in out.records:
            cdca.append(out.records["CDCA_t2v"].weights.numpy().mean(axis=1))
    stride = model.vision.stride
    grid = cfg.model.image_size // stride
    result = {"stride": stride}
    if ddca:
        result["ddca"] = np.concatenate(ddca).reshape(len(samples), cfg.num_aus, grid, grid)
    if cdca:
        result["cdca"] = np.concatenate(cdca).reshape(len(samples), grid, grid)
    return result


def _heatmap_overlay(image: np.ndarray, amap: np.ndarray, stride: int):
    from matplotlib import colormaps
    from PIL import Image

    rng = amap.max() - amap.min()
    norm = (amap - amap.min()) / rng if rng > 0 else np.zeros_like(amap)
    up = np.kron(norm, np.ones((stride, stride)))
    heat = colormaps["jet"](up)[..., :3]
    blend = 0.5 * image + 0.5 * heat
    return Image.fromarray(np.clip(np.round(blend * 255), 0, 255).astype(np.uint8))


def export_attention_maps(checkpoint, samples, out_dir, cfg=None, cache_dir=None) -> list[Path]:
    """Write ``{sample}_{au}.npy/.png`` per AU and ``{sample}_cdca.npy/.png``."""
    from .training import load_model

    cfg = cfg or checkpoint.run_config
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write attention maps to {out}: {exc}") from None
    model = load_model(checkpoint, cfg)
    text = text_features(model, cfg, checkpoint.param_hash, cache_dir)
    maps = attention_maps(model, samples, cfg, text)
    written = []
    for s_idx, sample in enumerate(samples):
        entries = []
        if "ddca" in maps:
            entries += [(au, maps["ddca"][s_idx, i]) for i, au in enumerate(cfg.data.au_ids)]
        if "cdca" in maps:
            entries.append(("cdca", maps["cdca"][s_idx]))
        for name, amap in entries:
            base = out / f"{sample.sample_id}_{name}"
            np.save(base.with_suffix(".npy"), amap.astype(np.float32))
            _heatmap_overlay(sample.image, amap, maps["stride"]).save(base.with_suffix(".png"))
            written.append(base.with_suffix(".npy"))
    return written


def cell_in_region(row: int, col: int, stride: int, region) -> bool:
    """Whether the image-space centre of feature cell (row, col) lies inside ``region``."""
    x0, y0, x1, y1 = region
    cx, cy = (col + 0.5) * stride, (row + 0.5) * stride
    return x0 <= cx < x1 and y0 <= cy < y1


def localization_rates(ddca_maps: np.ndarray, labels: np.ndarray, regions, stride: int) -> np.ndarray:
    """Per AU, fraction of positive samples whose DDCA argmax cell falls in the AU's region."""
    s, n, h, w = ddca_maps.shape
    rates = np.full(n, np.nan)
    for i in range(n):
        pos = np.flatnonzero(labels[:, i])
        if pos.size == 0:
            continue
        hits = 0
        for j in pos:
            r, c = divmod(int(ddca_maps[j, i].argmax()), w)
            hits += cell_in_region(r, c, stride, regions[i])
        rates[i] = hits / pos.size
    return rates


# ---------------------------------------------------------------------------
# graph dumps


def export_graph(stage1_checkpoint, samples, out_dir, cfg=None) -> Path:
    """Dump per-sample graphs from the stage-1 path as one JSON-lines file."""
    from .training import load_model

    cfg = cfg or stage1_checkpoint.run_config
    if not any(k.startswith("graph.") for k in stage1_checkpoint.state):
        raise ValueError("checkpoint carries no graph parameters")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = load_model(stage1_checkpoint, cfg)
    _, outs = predict(model, samples, cfg, stage1_head=True, return_outputs=True)
    path = out / "graphs.jsonl"
    idx = 0
    with path.open("w", encoding="utf-8") as fh:
        for o in outs:
            for b in range(o["U"].shape[0]):
                s = samples[idx]
                adj = o["adjacency"][b].numpy()
                rec = {
                    "sample_id": s.sample_id,
                    "k": int(model.graph.k),
                    "au_ids": list(cfg.data.au_ids),
                    "edges": [[int(i), int(j)] for i, j in zip(*np.nonzero(adj))],
                    "similarity": o["similarity"][b].numpy().round(6).tolist(),
                    "U_norms": o["U"][b].norm(dim=-1).numpy().round(6).tolist(),
                    "predictions": torch.sigmoid(o["logits"][b]).numpy().round(6).tolist(),
                    "labels": [int(v) for v in s.labels],
                }
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
                idx += 1
    return path


def read_graph_dump(path) -> list[dict]:
    records = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            rec = json.loads(line)
            n = len(rec["au_ids"])
            adj = np.zeros((n, n), dtype=np.int64)
            for i, j in rec["edges"]:
                adj[i, j] = 1
            rec["adjacency"] = adj
            records.append(rec)
    return records


# ---------------------------------------------------------------------------
# stats and tables


def count_parameters(module: torch.nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def report_model_stats(checkpoint, cfg=None, batch_size: int = 1, repeats: int = 3) -> dict:
    """Parameter counts, estimated multiply-accumulates and wall-clock per batch."""
    from torch.utils.flop_counter import FlopCounterMode

    from .model import MODULE_GROUPS
    from .training import load_model

    cfg = cfg or checkpoint.run_config
    model = load_model(checkpoint, cfg)
    per_module = {g: sum(p.numel() for p in model.group_parameters(g).values()) for g in MODULE_GROUPS}
    size = cfg.model.image_size
    images = torch.zeros(batch_size, size, size, 3)
    ids = torch.ones(cfg.num_aus, min(8, cfg.text.max_tokens), dtype=torch.long)
    mask = torch.ones_like(ids, dtype=torch.bool)
    with torch.no_grad():
        with FlopCounterMode(display=False) as counter:
            text = model.text(ids, mask)
            model.forward_stage2(images, text)
        timings = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            model.forward_stage2(images, model.text(ids, mask))
            timings.append(time.perf_counter() - t0)
    return {
        "config_hash": checkpoint.config_hash,
        "total_parameters": count_parameters(model),
        "parameters_per_module": per_module,
        "macs_per_forward": counter.get_total_flops() // 2,
        "batch_size": batch_size,
        "seconds_per_batch": float(np.median(timings)),
    }


def export_metrics_csv(report: F1Report, path, label: str = "HiVA") -> Path:
    return write_metrics_table([(label, report)], path)


def write_metrics_table(rows: Sequence[tuple[str, F1Report]], path) -> Path:
    """Tables IV-VI layout: header ``AU,<ids...>,AVE``; one row per run, percent with one decimal."""
    if not rows:
        raise ValueError("no reports to write")
    au_ids = rows[0][1].au_ids
    if not au_ids:
        raise ValueError("report has no AUs")
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["AU", *au_ids, "AVE"])
        for label, rep in rows:
            if rep.au_ids != au_ids:
                raise ValueError("all reports must share the AU ordering")
            writer.writerow([label, *(f"{v:.1f}" for v in rep.f1), f"{rep.mean_f1:.1f}"])
    return path
