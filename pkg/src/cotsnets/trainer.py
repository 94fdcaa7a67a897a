"""Dual-objective training loop for the universal network and auxiliary branches."""
from __future__ import annotations

import json
import logging
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import losses as L
from .data import augment, iterations_per_epoch, paired_iterator
from .geometry import GaussianSpec
from .metrics import MetricReport, evaluate
from .models import ModelConfig, build_auxiliary, build_universal

log = logging.getLogger(__name__)

LOSS_TERMS = ("seg", "distill", "boundary", "consistency", "aux")
STEP_MODES = ("alternating", "joint")

# Published Dice of the four ablation configurations on a private clinical set; kept for comparison only.
REFERENCE_ABLATION_DICE = {
    "baseline": 79.862,
    "+haam": 80.546,
    "+haam+consistency": 80.601,
    "+haam+consistency+boundary": 81.652,
}
ABLATION_ROWS = (
    ("baseline", dict(haam=False, consistency=False, boundary=False)),
    ("+haam", dict(haam=True, consistency=False, boundary=False)),
    ("+haam+consistency", dict(haam=True, consistency=True, boundary=False)),
    ("+haam+consistency+boundary", dict(haam=True, consistency=True, boundary=True)),
)


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class Ablation:
    haam: bool = True
    consistency: bool = True
    boundary: bool = True


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 0.05
    optimizer: str = "adamw"
    batch_size: int = 4
    epochs: int = 200
    input_size: tuple = (256, 256)
    alpha: float = 0.5
    beta: float = 0.5
    gamma: float = 1.0
    lam: float = 0.9
    seed: int = 0
    checkpoint_every: int = 10
    ablation: Ablation = field(default_factory=Ablation)
    grad_clip: float = 5.0
    step_mode: str = "alternating"
    boundary_reduction: str = "mean"
    augmentation: bool = True
    augment_prob: float = 0.5
    gaussian_kernel: int = 5
    gaussian_sigma: float = 1.0
    model: ModelConfig = field(default_factory=ModelConfig)
    aux_reduction: int = 8
    aux_spatial_kernel: int = 7
    eval_threshold: float = 0.5

    def __post_init__(self):
        if isinstance(self.ablation, dict):
            self.ablation = Ablation(**self.ablation)
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        self.input_size = tuple(self.input_size)
        # the top-level input size is authoritative for the model as well
        self.model = replace(self.model, input_size=self.input_size)

    def validate(self):
        for name in ("lr", "batch_size", "epochs", "checkpoint_every", "grad_clip"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.optimizer.lower() != "adamw":
            raise ValueError(f"only the adamw optimizer is supported, got {self.optimizer!r}")
        if self.step_mode not in STEP_MODES:
            raise ValueError(f"step_mode must be one of {STEP_MODES}, got {self.step_mode!r}")
        if self.boundary_reduction not in ("mean", "sum"):
            raise ValueError("boundary_reduction must be 'mean' or 'sum'")
        self.weights
        self.gaussian
        self.model_config().validate()
        return self

    @property
    def weights(self) -> L.LossWeights:
        return L.LossWeights(self.alpha, self.beta, self.gamma, self.lam)

    @property
    def gaussian(self) -> GaussianSpec:
        return GaussianSpec(self.gaussian_kernel, self.gaussian_sigma)

    def model_config(self) -> ModelConfig:
        d = self.model.to_dict()
        d["input_size"] = tuple(self.input_size)
        return ModelConfig.from_dict(d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        d["model"] = self.model_config().to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class TrainState:
    epoch: int = 0
    global_step: int = 0
    ema: L.EmaState = field(default_factory=L.EmaState)
    loss_history: dict = field(default_factory=lambda: {k: [] for k in LOSS_TERMS})
    best_metric: tuple = (None, None)


@dataclass
class StepObjectives:
    terms: dict
    uni_loss: torch.Tensor
    aux_loss: torch.Tensor
    batch_means: dict


def universal_total(terms: dict, weights: L.LossWeights) -> float:
    """Universal objective value recomputed from a loss record's raw terms."""
    return (weights.alpha * terms["seg"] + weights.beta * terms["distill"]
            + terms["boundary"] + terms["consistency"])


def seed_everything(seed: int):
    torch.manual_seed(seed)
    np.random.seed(seed % 2 ** 32)


class Trainer:
    """Holds both networks, their optimizers and the running training state."""

    def __init__(self, config: TrainConfig):
        self.config = config.validate()
        seed_everything(config.seed)
        mcfg = config.model_config()
        self.universal = build_universal(mcfg)
        self.auxiliary = (build_auxiliary(mcfg, config.aux_reduction, config.aux_spatial_kernel)
                          if config.ablation.haam else None)
        opt = dict(lr=config.lr, weight_decay=config.weight_decay)
        self.uni_opt = torch.optim.AdamW(self.universal.parameters(), **opt)
        self.aux_opt = (torch.optim.AdamW(self.auxiliary.parameters(), **opt)
                        if self.auxiliary is not None else None)
        self.state = TrainState(ema=L.EmaState(lam=config.lam))

    # ------------------------------------------------------------------ step

    def objectives(self, source_batch, target_batch) -> StepObjectives:
        """Forward both domains and build both objectives without touching any state.

        The consistency term blends the current EMA shadows with this batch's
        means (the value the EMA update is about to store), so it is
        differentiable through the batch means only.
        """
        cfg, w = self.config, self.config.weights
        batches = {"source": source_batch, "target": target_batch}
        for d, b in batches.items():
            if b.domain != d:
                raise ValueError(f"expected a {d} batch, got domain {b.domain!r}")
        joint = cfg.step_mode == "joint"
        outs = {d: self.universal(b.images, d) for d, b in batches.items()}

        aux_loss = torch.zeros(())
        aux_preds = {}
        if self.auxiliary is not None:
            for d, b in batches.items():
                feats, dec = outs[d].encoder_features, outs[d].decoder_last
                if not joint:
                    feats, dec = [f.detach() for f in feats], dec.detach()
                aux_preds[d] = self.auxiliary[d](feats, dec, b.images.shape[-2:])
                aux_loss = aux_loss + L.auxiliary_objective(aux_preds[d], b.masks)

        means = {d: outs[d].prediction.mean(dim=0) for d in batches}
        consist = torch.zeros(())
        if cfg.ablation.consistency:
            blended = {d: L.ema_blend(self.state.ema, means[d], d) for d in batches}
            consist = L.consistency_loss(blended["source"], blended["target"])

        seg = sum(L.seg_loss(outs[d].prediction, b.masks) for d, b in batches.items())
        distill = torch.zeros(())
        if aux_preds:
            distill = sum(L.distill_loss(aux_preds[d], outs[d].prediction) for d in batches)
        bound = torch.zeros(())
        if cfg.ablation.boundary:
            s, t = batches["source"], batches["target"]
            bound = L.boundary_loss(outs["source"].prediction, s.masks, s.boundaries,
                                    outs["target"].prediction, t.masks, t.boundaries,
                                    gamma=cfg.gamma, reduction=cfg.boundary_reduction)
        terms = {"seg": seg, "distill": distill, "boundary": bound, "consistency": consist, "aux": aux_loss}
        for k, v in terms.items():
            self._check_finite(k, v)
        uni_loss = L.universal_objective(seg, distill, bound, consist, w)
        return StepObjectives(terms, uni_loss, aux_loss, {d: m.detach() for d, m in means.items()})

    def step(self, source_batch, target_batch) -> dict:
        """One paired iteration: auxiliary update, EMA update, universal update."""
        cfg = self.config
        joint = cfg.step_mode == "joint"
        self.universal.train()
        if self.auxiliary is not None:
            self.auxiliary.train()
        obj = self.objectives(source_batch, target_batch)

        if self.auxiliary is not None and not joint:
            self.aux_opt.zero_grad(set_to_none=True)
            obj.aux_loss.backward()
            nn.utils.clip_grad_norm_(self.auxiliary.parameters(), cfg.grad_clip)
            self.aux_opt.step()

        ema = self.state.ema
        for d, m in obj.batch_means.items():
            ema = L.ema_update(ema, m, d)
        self.state.ema = ema

        self.uni_opt.zero_grad(set_to_none=True)
        if joint and self.aux_opt is not None:
            self.aux_opt.zero_grad(set_to_none=True)
            (obj.uni_loss + obj.aux_loss).backward()
            nn.utils.clip_grad_norm_(self.auxiliary.parameters(), cfg.grad_clip)
            self.aux_opt.step()
        else:
            obj.uni_loss.backward()
        nn.utils.clip_grad_norm_(self.universal.parameters(), cfg.grad_clip)
        self.uni_opt.step()

        self.state.global_step += 1
        record = {k: float(v.detach()) for k, v in obj.terms.items()}
        for k, v in record.items():
            self.state.loss_history[k].append(v)
        return record

    @staticmethod
    def _check_finite(name, value):
        if not torch.isfinite(value).all():
            raise NonFiniteLossError(f"non-finite {name} loss: {float(value.detach())}")

    # ------------------------------------------------------------ checkpoints

    def save_checkpoint(self, path, metric_snapshot: dict | None = None) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "config": self.config.to_dict(),
            "universal": self.universal.state_dict(),
            "auxiliary": self.auxiliary.state_dict() if self.auxiliary is not None else None,
            "uni_opt": self.uni_opt.state_dict(),
            "aux_opt": self.aux_opt.state_dict() if self.aux_opt is not None else None,
            "state": {
                "epoch": self.state.epoch,
                "global_step": self.state.global_step,
                "ema": self.state.ema.state_dict(),
                "loss_history": self.state.loss_history,
                "best_metric": list(self.state.best_metric),
            },
        }
        _atomic_write(path, lambda f: torch.save(payload, f), binary=True)
        manifest = {"config": self.config.to_dict(), "epoch": self.state.epoch,
                    "global_step": self.state.global_step, "seed": self.config.seed,
                    "metrics": metric_snapshot or {}}
        _atomic_write(path.with_suffix(".json"), lambda f: json.dump(manifest, f, indent=2))
        return path

    @classmethod
    def from_checkpoint(cls, path) -> "Trainer":
        payload = torch.load(path, map_location="cpu", weights_only=False)
        trainer = cls(TrainConfig.from_dict(payload["config"]))
        trainer.universal.load_state_dict(payload["universal"])
        trainer.uni_opt.load_state_dict(payload["uni_opt"])
        if trainer.auxiliary is not None and payload["auxiliary"] is not None:
            trainer.auxiliary.load_state_dict(payload["auxiliary"])
            trainer.aux_opt.load_state_dict(payload["aux_opt"])
        st = payload["state"]
        trainer.state = TrainState(epoch=st["epoch"], global_step=st["global_step"],
                                   ema=L.EmaState.from_state_dict(st["ema"]),
                                   loss_history=st["loss_history"],
                                   best_metric=tuple(st["best_metric"]))
        return trainer


def load_universal(path):
    """Universal network and its training config from a checkpoint."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    cfg = TrainConfig.from_dict(payload["config"])
    model = build_universal(cfg.model_config())
    model.load_state_dict(payload["universal"])
    model.eval()
    return model, cfg


def _atomic_write(path: Path, writer, binary: bool = False):
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb" if binary else "w") as f:
            writer(f)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def train_step(trainer: Trainer, batches) -> dict:
    source_batch, target_batch = batches
    return trainer.step(source_batch, target_batch)


def fit(config: TrainConfig, source, target, eval_set=None, out_dir=None, trainer: Trainer | None = None,
        eval_domain: str = "target"):
    """Train for ``config.epochs`` epochs (resuming from ``trainer`` if given).

    Writes ``train_log.jsonl``, ``checkpoints/epoch_<k>.ckpt`` and
    ``metrics.json`` under ``out_dir`` when one is given. Returns the trainer
    and the final report on ``eval_set`` (the target training set if None).
    """
    trainer = trainer or Trainer(config)
    cfg = trainer.config
    out = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_file = open(out / "train_log.jsonl", "a")

    transform = None
    if cfg.augmentation:
        gaussian = cfg.gaussian

        def transform(sample, rng):
            return augment(sample, rng, p=cfg.augment_prob, gaussian=gaussian)

    n_iter = iterations_per_epoch(len(source), len(target), cfg.batch_size)
    try:
        while trainer.state.epoch < cfg.epochs:
            epoch = trainer.state.epoch
            for sb, tb in paired_iterator(source, target, cfg.batch_size, cfg.seed, epoch, transform):
                rec = trainer.step(sb, tb)
                if log_file is not None:
                    line = {"step": trainer.state.global_step, "epoch": epoch, **rec,
                            "lr": trainer.uni_opt.param_groups[0]["lr"]}
                    log_file.write(json.dumps(line) + "\n")
            log_file is not None and log_file.flush()
            trainer.state.epoch += 1
            log.info("epoch %d/%d done (%d steps)", trainer.state.epoch, cfg.epochs, n_iter)
            if out is not None and (trainer.state.epoch % cfg.checkpoint_every == 0
                                    or trainer.state.epoch == cfg.epochs):
                trainer.save_checkpoint(out / "checkpoints" / f"epoch_{trainer.state.epoch}.ckpt")
    finally:
        if log_file is not None:
            log_file.close()

    report = evaluate(trainer.universal, eval_set if eval_set is not None else target,
                      threshold=cfg.eval_threshold, domain=eval_domain)
    trainer.state.best_metric = (report.aggregate["dice"], trainer.state.epoch)
    if out is not None:
        (out / "metrics.json").write_text(report.to_json(indent=2))
    return trainer, report


@dataclass
class AblationResult:
    name: str
    haam: bool
    consistency: bool
    boundary: bool
    report: MetricReport
    reference_dice: float

    def row(self) -> dict:
        a = self.report.aggregate
        return {"config": self.name, "haam": self.haam, "consistency": self.consistency,
                "boundary": self.boundary, "dice": a["dice"], "iou": a["iou"], "asd": a["asd"],
                "hd95": a["hd95"], "reference_dice_not_reproduced": self.reference_dice}


def ablation_run(config: TrainConfig, source, target, eval_set=None, out_dir=None) -> list[AblationResult]:
    """Train the four nested configurations, from the plain baseline up to the full method."""
    results = []
    for name, flags in ABLATION_ROWS:
        d = config.to_dict()
        d["ablation"] = flags
        cfg = TrainConfig.from_dict(d)
        sub = Path(out_dir) / name.strip("+").replace("+", "_") if out_dir is not None else None
        _, report = fit(cfg, source, target, eval_set, sub)
        results.append(AblationResult(name, report=report, reference_dice=REFERENCE_ABLATION_DICE[name], **flags))
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "ablation.json").write_text(json.dumps([r.row() for r in results], indent=2))
        (Path(out_dir) / "ablation.md").write_text(format_ablation_table(results))
    return results


def format_ablation_table(results) -> str:
    def fmt(v):
        return "n/a" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.3f}"

    lines = ["| # | config | HAAM | consistency | boundary | Dice | IoU | ASD | HD95 "
             "| Dice (paper reference, not reproduced) |",
             "|---|---|---|---|---|---|---|---|---|---|"]
    for i, r in enumerate(results, 1):
        a = r.report.aggregate
        mark = lambda b: "x" if b else ""
        lines.append(f"| {i} | {r.name} | {mark(r.haam)} | {mark(r.consistency)} | {mark(r.boundary)} "
                     f"| {fmt(a['dice'])} | {fmt(a['iou'])} | {fmt(a['asd'])} | {fmt(a['hd95'])} "
                     f"| {r.reference_dice:.3f} |")
    return "\n".join(lines) + "\n"
