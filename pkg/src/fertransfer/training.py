"""Fine-tuning protocol: loss, AdamW, warm-restart cosine schedule, accumulation, fit loop."""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .errors import DivergenceError, InvalidAccumulation, InvalidTarget, ShapeMismatch
from .labels import NUM_CLASSES

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 40
    seed: int = 42
    micro_batch: int = 2
    accum_steps: int = 8
    lr_encoder: float = 1e-7
    lr_decoder: float = 1e-5
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    sched_T0: int | None = None  # optimizer steps per cycle; None = one epoch
    sched_Tmult: int = 2
    eta_min: float = 0.0
    freeze_encoder_layers: int = 0  # >0 also freezes the patch embedding

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.micro_batch < 1 or self.accum_steps < 1:
            raise ValueError("micro_batch and accum_steps must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if not self.lr_encoder < self.lr_decoder:
            raise ValueError("lr_encoder must be smaller than lr_decoder")

    @property
    def effective_batch(self) -> int:
        return self.micro_batch * self.accum_steps


# ---------------------------------------------------------------------------
# loss


def cross_entropy(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean negative log-softmax at the target index, max-shifted for stability."""
    targets = torch.as_tensor(targets, dtype=torch.long)
    if logits.ndim != 2 or targets.shape != logits.shape[:1]:
        raise InvalidTarget(f"logits {tuple(logits.shape)} and targets {tuple(targets.shape)} disagree")
    k = logits.shape[1]
    if targets.numel() and (targets.min() < 0 or targets.max() >= k):
        raise InvalidTarget(f"targets must lie in 0..{k - 1}")
    shifted = logits - logits.max(dim=1, keepdim=True).values.detach()
    log_z = shifted.exp().sum(dim=1).log()
    picked = shifted.gather(1, targets[:, None]).squeeze(1)
    return (log_z - picked).mean()


# ---------------------------------------------------------------------------
# optimizer


def adamw_step(
    param: torch.Tensor,
    grad: torch.Tensor,
    exp_avg: torch.Tensor,
    exp_avg_sq: torch.Tensor,
    step: int,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """One in-place AdamW update; ``step`` is the 1-based step count after this update."""
    if grad.shape != param.shape or exp_avg.shape != param.shape or exp_avg_sq.shape != param.shape:
        raise ShapeMismatch(f"gradient/moment shapes do not match parameter {tuple(param.shape)}")
    b1, b2 = betas
    exp_avg.mul_(b1).add_(grad, alpha=1 - b1)
    exp_avg_sq.mul_(b2).addcmul_(grad, grad, value=1 - b2)
    m_hat = exp_avg / (1 - b1**step)
    v_hat = exp_avg_sq / (1 - b2**step)
    # decay uses the pre-update weights
    param.mul_(1 - lr * weight_decay)
    param.sub_(lr * m_hat / (v_hat.sqrt() + eps))


class AdamW:
    """AdamW over named parameter groups, each with its own base learning rate."""

    def __init__(self, groups: dict[str, list[nn.Parameter]], lrs: dict[str, float],
                 betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        seen: set[int] = set()
        for name, params in groups.items():
            for p in params:
                if id(p) in seen:
                    raise ValueError(f"parameter appears in more than one group ({name})")
                if not p.requires_grad:
                    raise ValueError(f"group {name} contains a non-trainable tensor")
                seen.add(id(p))
        self.groups = {k: list(v) for k, v in groups.items()}
        self.base_lrs = dict(lrs)
        self.lrs = dict(lrs)
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.state = {
            id(p): (torch.zeros_like(p), torch.zeros_like(p))
            for params in self.groups.values()
            for p in params
        }

    def parameters(self):
        for params in self.groups.values():
            yield from params

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    @torch.no_grad()
    def step(self) -> None:
        self.step_count += 1
        for name, params in self.groups.items():
            for p in params:
                grad = p.grad if p.grad is not None else torch.zeros_like(p)
                m, v = self.state[id(p)]
                adamw_step(p, grad, m, v, self.step_count, self.lrs[name],
                           self.betas, self.eps, self.weight_decay)

    def state_dict(self) -> dict:
        return {
            "step_count": self.step_count,
            "lrs": dict(self.lrs),
            "moments": {
                name: [[t.clone() for t in self.state[id(p)]] for p in params]
                for name, params in self.groups.items()
            },
        }

    def load_state_dict(self, sd: dict) -> None:
        self.step_count = sd["step_count"]
        self.lrs = dict(sd["lrs"])
        for name, params in self.groups.items():
            for p, (m, v) in zip(params, sd["moments"][name]):
                self.state[id(p)][0].copy_(m)
                self.state[id(p)][1].copy_(v)


# ---------------------------------------------------------------------------
# schedule


def cosine_warm_restart_lr(t: float, T_i: float, lr_max: float, eta_min: float = 0.0) -> float:
    if not 0 <= t <= T_i:
        raise ValueError(f"t={t} outside [0, {T_i}]")
    return eta_min + 0.5 * (lr_max - eta_min) * (1 + math.cos(math.pi * t / T_i))


def cycle_position(step: int, T0: int, Tmult: int = 2) -> tuple[int, int]:
    """Map a global step to (t within cycle, cycle length T_i)."""
    if T0 < 1 or Tmult < 1:
        raise ValueError("T0 and Tmult must be positive")
    T_i = T0
    while step >= T_i:
        step -= T_i
        T_i *= Tmult
    return step, T_i


class CosineWarmRestarts:
    """Per-group learning rates following the restart schedule, ticked once per optimizer step."""

    def __init__(self, optimizer: AdamW, T0: int, Tmult: int = 2, eta_min: float = 0.0):
        self.optimizer = optimizer
        self.T0 = T0
        self.Tmult = Tmult
        self.eta_min = eta_min
        self.step_count = 0
        self._apply()

    def lr_at(self, step: int, lr_max: float) -> float:
        t, T_i = cycle_position(step, self.T0, self.Tmult)
        return cosine_warm_restart_lr(t, T_i, lr_max, self.eta_min)

    def _apply(self) -> None:
        for name, base in self.optimizer.base_lrs.items():
            self.optimizer.lrs[name] = self.lr_at(self.step_count, base)

    def step(self) -> None:
        self.step_count += 1
        self._apply()


# ---------------------------------------------------------------------------
# accumulation


def parameter_groups(model, freeze_encoder_layers: int = 0) -> dict[str, list[nn.Parameter]]:
    """Split trainable parameters into the encoder and decoder groups.

    Freezing ``k`` encoder layers also freezes the patch embedding.
    """
    if freeze_encoder_layers:
        enc = model.encoder
        frozen = [enc.patch_embed, *enc.layers[:freeze_encoder_layers]]
        for mod in frozen:
            for p in mod.parameters():
                p.requires_grad_(False)
    return {"encoder": model.encoder_parameters(), "decoder": model.decoder_parameters()}


Batch = tuple[torch.Tensor, torch.Tensor]


def accumulate_gradients(model: nn.Module, micro_batches: Sequence[Batch]) -> float:
    """Backpropagate mean-of-micro-batch losses into ``.grad``; returns the mean loss."""
    if not micro_batches:
        raise InvalidAccumulation("no micro-batches")
    sizes = {len(y) for _, y in micro_batches}
    if len(sizes) != 1:
        raise InvalidAccumulation(f"micro-batches must share one size, got {sorted(sizes)}")
    total = 0.0
    for x, y in micro_batches:
        loss = cross_entropy(model(x), y) / len(micro_batches)
        loss.backward()
        total += loss.item()
    return total


def train_step_accumulated(model, optimizer: AdamW, scheduler: CosineWarmRestarts | None,
                           micro_batches: Sequence[Batch]) -> float:
    optimizer.zero_grad()
    loss = accumulate_gradients(model, micro_batches)
    optimizer.step()
    optimizer.zero_grad()
    if scheduler is not None:
        scheduler.step()
    return loss


# ---------------------------------------------------------------------------
# fit


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_war: float
    heldout_loss: float
    lr: dict[str, float]
    steps: int
    wall_time: float = field(default=0.0, compare=False)


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def best_epoch(self) -> int | None:
        """Epoch with the highest validation WAR; ties go to the earlier epoch."""
        if not self.records:
            return None
        return max(self.records, key=lambda r: (r.val_war, -r.epoch)).epoch

    def dumps(self) -> str:
        return "".join(json.dumps(asdict(r), sort_keys=True) + "\n" for r in self.records)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "TrainLog":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([EpochRecord(**json.loads(ln)) for ln in lines if ln.strip()])


class TensorData:
    """Preprocessed images and labels held in memory."""

    def __init__(self, images: torch.Tensor, labels: torch.Tensor):
        if len(images) != len(labels):
            raise ValueError("images and labels differ in length")
        self.images = images
        self.labels = torch.as_tensor(labels, dtype=torch.long)

    def __len__(self) -> int:
        return len(self.labels)

    @classmethod
    def from_manifest(cls, manifest, preprocess_cfg, dtype=torch.float32) -> "TensorData":
        from .preprocess import load_and_preprocess

        images = torch.stack([load_and_preprocess(s, preprocess_cfg) for s in manifest.samples])
        return cls(images.to(dtype), torch.from_numpy(manifest.labels()))


@torch.no_grad()
def predict_logits(model: nn.Module, data: TensorData, batch_size: int = 16) -> torch.Tensor:
    was_training = model.training
    model.eval()
    out = [model(data.images[i : i + batch_size]) for i in range(0, len(data), batch_size)]
    model.train(was_training)
    return torch.cat(out) if out else torch.empty(0, NUM_CLASSES)


def _war(model, data: TensorData) -> float:
    preds = predict_logits(model, data).argmax(dim=1)
    return 100.0 * (preds == data.labels).double().mean().item()


def epoch_batches(n: int, cfg: TrainConfig, epoch: int) -> list[list[torch.Tensor]]:
    """Seeded shuffle for one epoch, grouped into optimizer steps of micro-batch indices.

    A trailing partial micro-batch is dropped so micro-batches stay equal in
    size; the last step may hold fewer than ``accum_steps`` micro-batches.
    """
    gen = torch.Generator().manual_seed(cfg.seed * 1_000_003 + epoch)
    perm = torch.randperm(n, generator=gen)
    micro = [perm[i : i + cfg.micro_batch] for i in range(0, n - cfg.micro_batch + 1, cfg.micro_batch)]
    return [micro[i : i + cfg.accum_steps] for i in range(0, len(micro), cfg.accum_steps)]


def steps_per_epoch(n: int, cfg: TrainConfig) -> int:
    return math.ceil((n // cfg.micro_batch) / cfg.accum_steps)


@dataclass
class FitState:
    """Everything needed to resume ``fit`` exactly."""

    model: nn.Module
    optimizer: AdamW
    scheduler: CosineWarmRestarts
    log: TrainLog
    epoch: int = 0
    best_state: dict | None = None
    best_war: float = -math.inf
    # weights after the last completed epoch, kept once fit() restores the best ones
    last_state: dict | None = None

    def training_weights(self) -> dict:
        return self.last_state if self.last_state is not None else self.model.state_dict()


def make_fit_state(model, cfg: TrainConfig, n_train: int) -> FitState:
    groups = parameter_groups(model, cfg.freeze_encoder_layers)
    opt = AdamW(groups, {"encoder": cfg.lr_encoder, "decoder": cfg.lr_decoder},
                cfg.betas, cfg.eps, cfg.weight_decay)
    T0 = cfg.sched_T0 or max(1, steps_per_epoch(n_train, cfg))
    sched = CosineWarmRestarts(opt, T0, cfg.sched_Tmult, cfg.eta_min)
    return FitState(model, opt, sched, TrainLog())


def save_checkpoint(state: FitState, path: str | Path, extra: dict | None = None) -> None:
    torch.save(
        {
            "model": state.training_weights(),
            "model_config": state.model.cfg.to_dict(),
            "optimizer": state.optimizer.state_dict(),
            "scheduler_step": state.scheduler.step_count,
            "epoch": state.epoch,
            "log": [asdict(r) for r in state.log.records],
            "best_state": state.best_state,
            "best_war": state.best_war,
            "torch_rng": torch.get_rng_state(),
            "extra": extra or {},
        },
        path,
    )


def load_checkpoint(state: FitState, path: str | Path) -> FitState:
    ck = torch.load(path, weights_only=False)
    state.model.load_state_dict(ck["model"])
    state.last_state = None
    state.optimizer.load_state_dict(ck["optimizer"])
    state.scheduler.step_count = ck["scheduler_step"]
    state.scheduler._apply()
    state.epoch = ck["epoch"]
    state.log = TrainLog([EpochRecord(**r) for r in ck["log"]])
    state.best_state = ck["best_state"]
    state.best_war = ck["best_war"]
    torch.set_rng_state(ck["torch_rng"])
    return state


def fit(
    model: nn.Module,
    train: TensorData,
    val: TensorData,
    cfg: TrainConfig,
    heldout: TensorData | None = None,
    state: FitState | None = None,
    on_epoch_end: Callable[[FitState], None] | None = None,
) -> tuple[nn.Module, TrainLog]:
    """Train for ``cfg.epochs`` and return the model restored to its best-validation-WAR epoch.

    ``heldout`` is a fixed batch whose loss is logged each epoch; a
    non-finite value raises DivergenceError. It defaults to the first
    effective batch of the validation set.
    """
    if state is None:
        torch.manual_seed(cfg.seed)
        state = make_fit_state(model, cfg, len(train))
    if heldout is None:
        k = min(len(val), cfg.effective_batch)
        heldout = TensorData(val.images[:k], val.labels[:k])
    if state.last_state is not None:
        model.load_state_dict(state.last_state)
        state.last_state = None
    if state.best_state is None:
        state.best_state = copy.deepcopy(model.state_dict())

    model.train()
    while state.epoch < cfg.epochs:
        t0 = time.perf_counter()
        losses = []
        for step_idx in epoch_batches(len(train), cfg, state.epoch):
            micro = [(train.images[i], train.labels[i]) for i in step_idx]
            losses.append(train_step_accumulated(model, state.optimizer, state.scheduler, micro))
        val_war = _war(model, val)
        with torch.no_grad():
            model.eval()
            h_loss = cross_entropy(model(heldout.images), heldout.labels).item() if len(heldout) else 0.0
            model.train()
        if not math.isfinite(h_loss):
            raise DivergenceError(f"held-out loss became {h_loss} at epoch {state.epoch + 1}")
        state.epoch += 1
        rec = EpochRecord(
            epoch=state.epoch,
            train_loss=float(np.mean(losses)) if losses else float("nan"),
            val_war=val_war,
            heldout_loss=h_loss,
            lr=dict(state.optimizer.lrs),
            steps=state.optimizer.step_count,
            wall_time=time.perf_counter() - t0,
        )
        state.log.records.append(rec)
        log.info("epoch %d loss %.4f val WAR %.2f", rec.epoch, rec.train_loss, rec.val_war)
        if val_war > state.best_war:
            state.best_war = val_war
            state.best_state = copy.deepcopy(model.state_dict())
        if on_epoch_end is not None:
            on_epoch_end(state)

    state.last_state = copy.deepcopy(model.state_dict())
    model.load_state_dict(state.best_state)
    model.eval()
    return model, state.log
