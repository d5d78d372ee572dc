"""Two-stage training, loss composition and checkpoint I/O."""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from safetensors.torch import load_file, save_file

from .config import RunConfig, config_hash, diff_configs, from_dict, model_hash, architecture, to_dict
from .data import AUSample, DataError, batch_iterator, compute_class_weights, epoch_seed, load_description_set
from .evaluation import f1_from_predictions
from .graph import au_loss
from .model import HiVA, images_to_tensor, state_hash
from .text import TokenizedDescriptions, WordPieceTokenizer, default_descriptions_path, diff_loss

logger = logging.getLogger(__name__)

STAGE_GROUPS = {
    1: ("vision_encoding", "au_branch_graph"),
    2: ("vision_encoding", "text_encoding", "cross_modal_interaction"),
}


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    state: dict[str, torch.Tensor]
    stage: int
    epoch: int
    step: int
    config: dict
    seed: int
    rng_state: torch.Tensor
    optimizer: dict | None = None
    history: list[dict] = field(default_factory=list, compare=False)

    @property
    def run_config(self) -> RunConfig:
        return from_dict(self.config)

    @property
    def config_hash(self) -> str:
        return config_hash(self.run_config)

    @property
    def model_hash(self) -> str:
        return model_hash(self.run_config)

    @property
    def param_hash(self) -> str:
        return state_hash(self.state)


def total_loss(l_au, l_diff, lam: float):
    """L_tot = L_au + lambda * L_diff."""
    for name, v in (("L_au", l_au), ("L_diff", l_diff)):
        if not math.isfinite(float(v.detach() if torch.is_tensor(v) else v)):
            raise TrainingError(f"non-finite {name}: {v}")
    return l_au + lam * l_diff


def setup_runtime(cfg: RunConfig) -> None:
    torch.set_num_threads(cfg.threads)
    torch.use_deterministic_algorithms(cfg.deterministic)


def build_model(cfg: RunConfig) -> HiVA:
    torch.manual_seed(cfg.seed)
    return HiVA(cfg)


def stage_parameters(model: HiVA, stage: int) -> list[tuple[str, torch.nn.Parameter]]:
    named = {}
    for group in STAGE_GROUPS[stage]:
        named.update(model.group_parameters(group))
    return [(k, p) for k, p in model.named_parameters() if k in named and p.requires_grad]


def load_descriptions(cfg: RunConfig) -> TokenizedDescriptions:
    path = Path(cfg.data.descriptions) if cfg.data.descriptions else default_descriptions_path()
    if not path.is_file():
        raise DataError(f"description set not found: {path}")
    desc = load_description_set(path, cfg.data.au_ids)
    return TokenizedDescriptions(desc, WordPieceTokenizer(cfg.data.vocab), cfg.text.max_tokens)


def class_weight_tensor(cfg: RunConfig, samples: Sequence[AUSample]) -> torch.Tensor:
    if not cfg.loss.class_weights:
        return torch.ones(cfg.num_aus)
    return torch.tensor(compute_class_weights(samples), dtype=torch.float32)


# ---------------------------------------------------------------------------
# optimizer state <-> flat tensors


def _flatten_optimizer(opt: torch.optim.Optimizer) -> tuple[dict[str, torch.Tensor], list]:
    sd = opt.state_dict()
    tensors = {}
    for idx, st in sd["state"].items():
        for key, val in st.items():
            tensors[f"{idx}/{key}"] = val.detach().clone() if torch.is_tensor(val) else torch.tensor(val)
    groups = [{k: v for k, v in g.items()} for g in sd["param_groups"]]
    return tensors, groups


def _unflatten_optimizer(tensors: dict[str, torch.Tensor], groups: list) -> dict:
    state: dict[int, dict] = {}
    for name, val in tensors.items():
        idx, key = name.split("/", 1)
        state.setdefault(int(idx), {})[key] = val
    return {"state": state, "param_groups": groups}


# ---------------------------------------------------------------------------
# stage loop


def _run_stage(cfg: RunConfig, stage: int, model: HiVA, samples: Sequence[AUSample], step_fn: Callable,
               resume: Checkpoint | None, log_path: str | Path | None, on_step: Callable | None) -> Checkpoint:
    if not samples:
        raise TrainingError("training dataset is empty")
    st = cfg.stage1 if stage == 1 else cfg.stage2
    params = stage_parameters(model, stage)
    opt = torch.optim.Adam([p for _, p in params], lr=st.lr)
    start_epoch, step = 0, 0
    if resume is not None and resume.stage == stage:
        start_epoch, step = resume.epoch, resume.step
        if resume.optimizer is not None:
            opt.load_state_dict(_unflatten_optimizer(resume.optimizer["tensors"], resume.optimizer["groups"]))
        torch.set_rng_state(resume.rng_state)
    history = list(resume.history) if resume is not None and resume.stage == stage else []
    log_fh = open(log_path, "a", encoding="utf-8") if log_path else None
    epoch = start_epoch
    model.train()
    try:
        while epoch < st.epochs and (st.max_steps is None or step < st.max_steps):
            t0 = time.perf_counter()
            rng = np.random.default_rng([cfg.seed, stage, epoch])
            sums = {"L_au": 0.0, "L_diff": 0.0, "L_tot": 0.0}
            n_batches, probs, labels = 0, [], []
            for batch in batch_iterator(samples, cfg.data.batch_size, epoch_seed(cfg.seed, epoch)):
                if st.max_steps is not None and step >= st.max_steps:
                    break
                if on_step is not None:
                    on_step(stage, step, model)
                opt.zero_grad(set_to_none=True)
                try:
                    parts = step_fn(batch, rng)
                except TrainingError as exc:
                    raise TrainingError(f"non-finite loss at stage {stage}, epoch {epoch}, step {step}: {exc}") from None
                loss = parts["L_tot"]
                if not torch.isfinite(loss):
                    raise TrainingError(
                        f"non-finite loss at stage {stage}, epoch {epoch}, step {step}: "
                        + ", ".join(f"{k}={float(v):.6g}" for k, v in parts.items() if k != "logits")
                    )
                loss.backward()
                opt.step()
                step += 1
                n_batches += 1
                for k in sums:
                    sums[k] += float(parts[k].detach())
                probs.append(torch.sigmoid(parts["logits"]).detach().numpy())
                labels.append(batch.labels)
            epoch += 1
            if n_batches == 0:
                break
            report = f1_from_predictions(np.concatenate(probs), np.concatenate(labels), cfg.eval.threshold,
                                         cfg.data.au_ids)
            record = {"stage": stage, "epoch": epoch, "step": step,
                      **{k: v / n_batches for k, v in sums.items()},
                      "mean_F1": report.mean_f1, "wall_time": time.perf_counter() - t0}
            history.append(record)
            logger.info("stage %d epoch %d: L_tot=%.4f mean_F1=%.1f", stage, epoch, record["L_tot"], record["mean_F1"])
            if log_fh:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
    finally:
        if log_fh:
            log_fh.close()
    opt_tensors, opt_groups = _flatten_optimizer(opt)
    return Checkpoint(
        state={k: v.detach().clone() for k, v in model.state_dict().items()},
        stage=stage, epoch=epoch, step=step, config=to_dict(cfg), seed=cfg.seed,
        rng_state=torch.get_rng_state(), optimizer={"tensors": opt_tensors, "groups": opt_groups},
        history=history,
    )


def train_stage1(cfg: RunConfig, samples: Sequence[AUSample], resume: Checkpoint | None = None,
                 log_path: str | Path | None = None, on_step: Callable | None = None) -> Checkpoint:
    """Vision encoder + AU branches + graph refinement, trained with the weighted AU loss."""
    if not samples:
        raise TrainingError("training dataset is empty")
    setup_runtime(cfg)
    model = build_model(cfg)
    if resume is not None:
        check_compatible(resume, cfg)
        model.load_state_dict(resume.state)
    weights = class_weight_tensor(cfg, samples)

    def step_fn(batch, rng):
        out = model.forward_stage1(images_to_tensor(batch.images))
        l_au = au_loss(out["logits"], torch.from_numpy(batch.labels), weights)
        zero = torch.zeros((), dtype=l_au.dtype)
        return {"L_au": l_au, "L_diff": zero, "L_tot": total_loss(l_au, zero, 0.0), "logits": out["logits"]}

    return _run_stage(cfg, 1, model, samples, step_fn, resume, log_path, on_step)


def train_stage2(cfg: RunConfig, samples: Sequence[AUSample], stage1_ckpt: Checkpoint | None,
                 resume: Checkpoint | None = None, log_path: str | Path | None = None,
                 on_step: Callable | None = None, descriptions: TokenizedDescriptions | None = None) -> Checkpoint:
    """Vision encoder + text branch + interaction, trained with L_au + lambda * L_diff.

    The graph refinement and stage-1 head stay out of the forward path.
    """
    if stage1_ckpt is None and resume is None:
        raise CheckpointError("stage-1 checkpoint required")
    if not samples:
        raise TrainingError("training dataset is empty")
    setup_runtime(cfg)
    source = resume if resume is not None else stage1_ckpt
    check_compatible(source, cfg)
    model = build_model(cfg)
    model.load_state_dict(source.state)
    ablation = cfg.ablation
    tokenized = None
    if not ablation.no_text:
        tokenized = descriptions if descriptions is not None else load_descriptions(cfg)
    weights = class_weight_tensor(cfg, samples)
    lam = 0.0 if ablation.no_diff_loss else cfg.loss.lam

    def step_fn(batch, rng):
        text = None
        l_diff = torch.zeros(())
        if tokenized is not None:
            ids, mask = tokenized.canonical() if ablation.no_aug else tokenized.sample(rng)
            text = model.text(ids, mask)
            l_diff = diff_loss(text.sentences)
        out = model.forward_stage2(images_to_tensor(batch.images), text, ablation)
        l_au = au_loss(out.logits, torch.from_numpy(batch.labels), weights)
        return {"L_au": l_au, "L_diff": l_diff, "L_tot": total_loss(l_au, l_diff, lam), "logits": out.logits}

    return _run_stage(cfg, 2, model, samples, step_fn, resume, log_path, on_step)


def load_model(ckpt: Checkpoint, cfg: RunConfig | None = None) -> HiVA:
    cfg = cfg or ckpt.run_config
    check_compatible(ckpt, cfg)
    torch.manual_seed(cfg.seed)
    model = HiVA(cfg)
    model.load_state_dict(ckpt.state)
    model.eval()
    return model


# ---------------------------------------------------------------------------
# checkpoint files


def _paths(path: str | Path) -> tuple[Path, Path]:
    path = Path(path)
    if path.suffix != ".safetensors":
        path = path.with_name(path.name + ".safetensors")
    return path, path.with_suffix(".json")


def check_compatible(ckpt: Checkpoint, cfg: RunConfig) -> None:
    if ckpt.model_hash != model_hash(cfg):
        diff = diff_configs(architecture(ckpt.run_config), architecture(cfg))
        raise CheckpointError("config hash mismatch: " + "; ".join(diff))


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    blob, manifest_path = _paths(path)
    blob.parent.mkdir(parents=True, exist_ok=True)
    tensors = {f"model/{k}": v.contiguous() for k, v in ckpt.state.items()}
    groups = None
    if ckpt.optimizer is not None:
        tensors.update({f"optim/{k}": v.contiguous() for k, v in ckpt.optimizer["tensors"].items()})
        groups = ckpt.optimizer["groups"]
    save_file(tensors, str(blob))
    manifest = {
        "blob_sha256": hashlib.sha256(blob.read_bytes()).hexdigest(),
        "format": "hiva-checkpoint/1",
        "stage": ckpt.stage,
        "epoch": ckpt.epoch,
        "step": ckpt.step,
        "seed": ckpt.seed,
        "config_hash": ckpt.config_hash,
        "model_hash": ckpt.model_hash,
        "param_hash": ckpt.param_hash,
        "rng_state": base64.b64encode(ckpt.rng_state.numpy().tobytes()).decode(),
        "optimizer_groups": groups,
        "config": ckpt.config,
    }
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return blob


def load_checkpoint(path: str | Path, cfg: RunConfig | None = None) -> Checkpoint:
    blob, manifest_path = _paths(path)
    if not blob.is_file() or not manifest_path.is_file():
        raise CheckpointError(f"checkpoint not found: {blob}")
    try:
        manifest = json.loads(manifest_path.read_text())
        if hashlib.sha256(blob.read_bytes()).hexdigest() != manifest.get("blob_sha256"):
            raise CheckpointError("blob digest mismatch")
        tensors = load_file(str(blob))
    except Exception as exc:  # corrupt blob or manifest
        raise CheckpointError(f"corrupt checkpoint {blob}: {exc}") from None
    state = {k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")}
    if state_hash(state) != manifest.get("param_hash"):
        raise CheckpointError(f"corrupt checkpoint {blob}: parameter hash mismatch")
    optim = {k[len("optim/"):]: v for k, v in tensors.items() if k.startswith("optim/")}
    rng = torch.from_numpy(np.frombuffer(base64.b64decode(manifest["rng_state"]), dtype=np.uint8).copy())
    ckpt = Checkpoint(
        state=state, stage=manifest["stage"], epoch=manifest["epoch"], step=manifest["step"],
        config=manifest["config"], seed=manifest["seed"], rng_state=rng,
        optimizer={"tensors": optim, "groups": manifest["optimizer_groups"]} if manifest["optimizer_groups"] else None,
    )
    if ckpt.config_hash != manifest["config_hash"]:
        raise CheckpointError(f"corrupt checkpoint {blob}: config hash mismatch")
    if cfg is not None:
        check_compatible(ckpt, cfg)
    return ckpt
