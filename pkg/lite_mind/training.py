"""Contrastive and MSE losses, gradient verification, the AdamW step and the training loop"""
import copy
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.optim import AdamW
from torch.optim.lr_scheduler import LambdaLR

from lite_mind.backbone import BackboneConfig, DftBackbone
from lite_mind.constants import (
    ADAM_EPS, ALPHA, BATCH_SIZE, BETAS, EPOCHS, EPS, GRAD_CHECK_FLOOR, GRAD_CHECK_STEP,
    GRAD_CHECK_TOLERANCE, LEARNING_RATE, LOSS_DIRECTIONS, TAU, WARMUP_STEPS, WEIGHT_DECAY,
)
from lite_mind.data_handler import Dataset, read_parameters, write_parameters
from lite_mind.errors import ConfigError, DataError, GraphError, NumericalError, ShapeError
from lite_mind.retrieval import EmbeddingStore, full_rank_retrieval
from lite_mind.utils import read_json, seed_everything, write_json

logger = logging.getLogger(__name__)

LOSS_CURVE_COLUMNS = ['epoch', 'train_loss', 'eval_top1_fwd', 'eval_top1_bwd', 'wall_seconds']


def _check_fields(cls, values: Mapping[str, Any], section: str) -> None:
    unknown = set(values) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"unknown {section} fields: {sorted(unknown)}")


@dataclass
class LossConfig:
    tau: float = TAU
    alpha: float = ALPHA
    direction: str = 'symmetric'

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError(f"loss.tau must be > 0, got {self.tau}")
        if self.alpha < 0:
            raise ConfigError(f"loss.alpha must be >= 0, got {self.alpha}")
        if self.direction not in LOSS_DIRECTIONS:
            raise ConfigError(f"loss.direction must be one of {LOSS_DIRECTIONS}, got {self.direction!r}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: Mapping[str, Any]) -> "LossConfig":
        _check_fields(cls, values, 'loss')
        return cls(**values)


@dataclass
class OptimizerConfig:
    """AdamW hyperparameters; warmup_steps > 0 ramps the learning rate linearly"""
    lr: float = LEARNING_RATE
    weight_decay: float = WEIGHT_DECAY
    betas: Tuple[float, float] = BETAS
    eps: float = ADAM_EPS
    warmup_steps: int = WARMUP_STEPS

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if self.lr < 0 or self.weight_decay < 0 or self.eps <= 0:
            raise ConfigError("optimizer.lr and weight_decay must be >= 0, eps > 0")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigError(f"optimizer.betas must be two values in [0, 1), got {self.betas}")
        if self.warmup_steps < 0:
            raise ConfigError("optimizer.warmup_steps must be >= 0")

    def to_dict(self) -> Dict[str, Any]:
        values = asdict(self)
        values['betas'] = list(self.betas)
        return values

    @classmethod
    def from_dict(cls, values: Mapping[str, Any]) -> "OptimizerConfig":
        _check_fields(cls, values, 'optimizer')
        return cls(**values)


@dataclass
class TrainConfig:
    epochs: int = EPOCHS
    batch_size: int = BATCH_SIZE
    seed: int = 0
    threads: Optional[int] = None
    record_wall_time: bool = False
    embedding_kind: str = 'hidden'

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"train.epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise ConfigError(f"train.batch_size must be >= 2, got {self.batch_size}")
        if self.seed < 0:
            raise ConfigError(f"train.seed must be >= 0, got {self.seed}")
        if self.embedding_kind not in ('hidden', 'cls'):
            raise ConfigError(f"train.embedding_kind must be hidden or cls, got {self.embedding_kind!r}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: Mapping[str, Any]) -> "TrainConfig":
        _check_fields(cls, values, 'train')
        return cls(**values)


def contrastive_loss(f: torch.Tensor, v: torch.Tensor, config: LossConfig) -> torch.Tensor:
    """InfoNCE over cosine similarities of flattened embeddings, temperature tau"""
    if f.shape[0] != v.shape[0]:
        raise ShapeError(f"batch sizes differ: {f.shape[0]} voxel vs {v.shape[0]} image embeddings")
    batch = f.shape[0]
    if batch < 2:
        raise ShapeError(f"contrastive loss needs a batch of at least 2, got {batch}")
    f = F.normalize(f.reshape(batch, -1), dim=1, eps=EPS)
    v = F.normalize(v.reshape(batch, -1), dim=1, eps=EPS)
    if f.shape[1] != v.shape[1]:
        raise ShapeError(f"embedding sizes differ: {f.shape[1]} vs {v.shape[1]}")
    logits = f @ v.T / config.tau
    if torch.isnan(logits).any():
        raise NumericalError("NaN in contrastive logits")
    labels = torch.arange(batch, device=logits.device)
    # cross_entropy applies log-softmax with max subtraction
    if config.direction == 'voxel_to_image':
        return F.cross_entropy(logits, labels)
    if config.direction == 'image_to_voxel':
        return F.cross_entropy(logits.T, labels)
    return 0.5 * (F.cross_entropy(logits, labels) + F.cross_entropy(logits.T, labels))


def mse_loss(v_hat: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Batch mean of squared L2 distances"""
    if v_hat.shape != v.shape:
        raise ShapeError(f"mse_loss shape mismatch: {tuple(v_hat.shape)} vs {tuple(v.shape)}")
    if v.shape[0] == 0:
        raise ShapeError("mse_loss of an empty batch")
    return ((v_hat - v) ** 2).reshape(v.shape[0], -1).sum(dim=1).mean()


def total_loss(f: torch.Tensor, v: torch.Tensor, config: LossConfig,
               v_hat: Optional[torch.Tensor] = None, v_target: Optional[torch.Tensor] = None) -> torch.Tensor:
    """contrastive + alpha * mse; alpha = 0 never evaluates the MSE branch"""
    loss = contrastive_loss(f, v, config)
    if config.alpha == 0:
        return loss
    prediction = f if v_hat is None else v_hat
    target = v if v_target is None else v_target
    return loss + config.alpha * mse_loss(prediction, target)


@dataclass
class Batch:
    """Voxel rows, contrastive targets, and optional MSE targets for the projector"""
    voxels: torch.Tensor
    targets: torch.Tensor
    mse_targets: Optional[torch.Tensor] = None

    def to(self, dtype: torch.dtype) -> "Batch":
        return Batch(self.voxels.to(dtype), self.targets.to(dtype),
                     None if self.mse_targets is None else self.mse_targets.to(dtype))

    def __len__(self) -> int:
        return self.voxels.shape[0]


def named_parameters(model: nn.Module, projector: Optional[nn.Module] = None) -> List[Tuple[str, nn.Parameter]]:
    named = list(model.named_parameters())
    if projector is not None:
        named += [(f"projector_stage.{name}", p) for name, p in projector.named_parameters()]
    return named


def batch_loss(model: nn.Module, batch: Batch, config: LossConfig,
               projector: Optional[nn.Module] = None) -> torch.Tensor:
    f = model(batch.voxels)
    v_hat = projector(f) if projector is not None and config.alpha > 0 else None
    return total_loss(f, batch.targets, config, v_hat=v_hat, v_target=batch.mse_targets)


@dataclass
class GradientSet:
    loss: float
    grads: Dict[str, torch.Tensor]


def backward(model: nn.Module, batch: Batch, config: LossConfig,
             projector: Optional[nn.Module] = None) -> GradientSet:
    """Reverse-mode gradients of the total loss for every learnable tensor.

    Complex parameters are stored as split (re, im) tensors, so each part gets its own gradient.
    """
    named = named_parameters(model, projector)
    loss = batch_loss(model, batch, config, projector)
    if loss.grad_fn is None:
        raise GraphError("loss has no recorded graph; was the forward pass run under no_grad?")
    grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
    result = {}
    for (name, param), grad in zip(named, grads):
        result[name] = torch.zeros_like(param) if grad is None else grad
    return GradientSet(loss=float(loss.detach()), grads=result)


@dataclass
class GradCheckReport:
    per_parameter: Dict[str, float]
    worst_parameter: str
    worst_index: Tuple[int, ...]
    max_error: float
    tolerance: float
    passed: bool

    def to_dict(self) -> Dict[str, Any]:
        values = asdict(self)
        values['worst_index'] = list(self.worst_index)
        return values


def grad_check(model: nn.Module, batch: Batch, config: LossConfig,
               tolerance: float = GRAD_CHECK_TOLERANCE, projector: Optional[nn.Module] = None,
               analytic: Optional[Mapping[str, torch.Tensor]] = None,
               step: float = GRAD_CHECK_STEP) -> GradCheckReport:
    """Compare analytic gradients with central differences, coordinate by coordinate, in float64.

    Relative error is |a - n| / max(|a|, |n|, floor); step is scaled by max(1, |p|).
    """
    model64 = copy.deepcopy(model).double()
    projector64 = copy.deepcopy(projector).double() if projector is not None else None
    batch64 = batch.to(torch.float64)
    if analytic is None:
        analytic = backward(model64, batch64, config, projector64).grads
    per_parameter = {}
    worst = (-1.0, '', (0,))
    with torch.no_grad():
        for name, param in named_parameters(model64, projector64):
            flat = param.view(-1)
            grad = analytic[name].detach().reshape(-1).to(torch.float64)
            max_error, max_index = 0.0, 0
            for i in range(flat.numel()):
                original = float(flat[i])
                h = step * max(1.0, abs(original))
                flat[i] = original + h
                plus = float(batch_loss(model64, batch64, config, projector64))
                flat[i] = original - h
                minus = float(batch_loss(model64, batch64, config, projector64))
                flat[i] = original
                numeric = (plus - minus) / (2 * h)
                exact = float(grad[i])
                error = abs(exact - numeric) / max(abs(exact), abs(numeric), GRAD_CHECK_FLOOR)
                if error > max_error:
                    max_error, max_index = error, i
            per_parameter[name] = max_error
            if max_error > worst[0]:
                index = tuple(int(j) for j in np.unravel_index(max_index, tuple(param.shape)))
                worst = (max_error, name, index)
    report = GradCheckReport(per_parameter=per_parameter, worst_parameter=worst[1],
                             worst_index=worst[2], max_error=max(worst[0], 0.0),
                             tolerance=tolerance, passed=worst[0] <= tolerance)
    level = logging.INFO if report.passed else logging.WARNING
    logger.log(level, f"Gradient check {'passed' if report.passed else 'failed'}: max error "
                      f"{report.max_error:.3e} at {report.worst_parameter}{list(report.worst_index)}")
    return report


def build_optimizer(parameters, config: OptimizerConfig) -> Tuple[AdamW, LambdaLR]:
    """AdamW with decoupled decay p <- p - lr*(m_hat/(sqrt(v_hat)+eps) + wd*p)"""
    optimizer = AdamW(parameters, lr=config.lr, betas=config.betas, eps=config.eps,
                      weight_decay=config.weight_decay)
    warmup = config.warmup_steps
    scheduler = LambdaLR(optimizer, lambda step: min(1.0, (step + 1) / warmup) if warmup else 1.0)
    return optimizer, scheduler


def optimizer_step(named: Sequence[Tuple[str, nn.Parameter]], grads: Mapping[str, torch.Tensor],
                   optimizer: AdamW, scheduler: Optional[LambdaLR] = None) -> None:
    """Apply one update; aborts naming the parameter on a non-finite gradient or result"""
    for name, param in named:
        grad = grads[name]
        if grad.shape != param.shape:
            raise ShapeError(f"gradient for {name} has shape {tuple(grad.shape)}, parameter {tuple(param.shape)}")
        if not torch.isfinite(grad).all():
            raise NumericalError(f"non-finite gradient for parameter {name}")
        param.grad = grad.detach().to(param.dtype)
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)
    for name, param in named:
        if not torch.isfinite(param).all():
            raise NumericalError(f"non-finite update for parameter {name}")
    if scheduler is not None:
        scheduler.step()


@dataclass
class PairedSet:
    """Voxel rows paired with target embeddings; mse_targets feed the projector stage"""
    ids: List[str]
    voxels: np.ndarray
    targets: np.ndarray
    mse_targets: Optional[np.ndarray] = None

    def __post_init__(self):
        if len(self.ids) == 0:
            raise DataError("training set is empty")
        if not len(self.ids) == self.voxels.shape[0] == self.targets.shape[0]:
            raise ShapeError(f"{len(self.ids)} ids, {self.voxels.shape[0]} voxel rows, "
                             f"{self.targets.shape[0]} target rows")
        if self.mse_targets is not None and self.mse_targets.shape[0] != len(self.ids):
            raise ShapeError("mse targets do not match the number of pairs")

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def from_dataset(cls, dataset: Dataset, kind: str = 'hidden',
                     mse_kind: Optional[str] = None) -> "PairedSet":
        targets = dataset.targets(kind)
        mse_targets = dataset.targets(mse_kind).items() if mse_kind else None
        return cls(ids=list(dataset.voxels.ids), voxels=dataset.voxels.matrix,
                   targets=targets.items(), mse_targets=mse_targets)

    def batch(self, rows, dtype: torch.dtype = torch.float32) -> Batch:
        mse = None if self.mse_targets is None else torch.as_tensor(self.mse_targets[rows], dtype=dtype)
        return Batch(torch.as_tensor(self.voxels[rows], dtype=dtype),
                     torch.as_tensor(self.targets[rows], dtype=dtype), mse)


def encode(model: nn.Module, voxels: np.ndarray, batch_size: int = BATCH_SIZE) -> np.ndarray:
    """Backbone outputs for every voxel row, without recording a graph"""
    dtype = next(model.parameters()).dtype
    outputs = []
    with torch.no_grad():
        for start in range(0, voxels.shape[0], batch_size):
            chunk = torch.as_tensor(voxels[start:start + batch_size], dtype=dtype)
            outputs.append(model(chunk).numpy())
    return np.concatenate(outputs).astype(np.float64)


@dataclass
class TrainResult:
    curve: pd.DataFrame
    best_epoch: int
    best_score: float
    checkpoint_dir: Optional[Path] = None
    history: List[Dict[str, float]] = field(default_factory=list)


class Trainer:
    """Minibatch training of a backbone (and optionally a jointly trained projector)"""

    def __init__(self, model: DftBackbone, loss_config: LossConfig, optimizer_config: OptimizerConfig,
                 train_config: TrainConfig, projector: Optional[nn.Module] = None):
        self.model = model
        self.loss_config = loss_config
        self.optimizer_config = optimizer_config
        self.train_config = train_config
        self.projector = projector if loss_config.alpha > 0 else None
        if projector is not None and self.projector is None:
            logger.info("alpha = 0: attached projector receives no gradient and is not trained")
        self.named = named_parameters(model, self.projector)
        self.optimizer, self.scheduler = build_optimizer([p for _, p in self.named], optimizer_config)

    def _check_shapes(self, data: PairedSet) -> None:
        config = self.model.config
        if data.voxels.shape[1] != config.voxel_len:
            raise ShapeError(f"dataset voxel length {data.voxels.shape[1]} does not match model {config.voxel_len}")
        if int(np.prod(data.targets.shape[1:])) != int(np.prod(config.output_shape)):
            raise ShapeError(f"target shape {data.targets.shape[1:]} does not match model output {config.output_shape}")

    def train_epoch(self, data: PairedSet, generator: torch.Generator) -> float:
        order = torch.randperm(len(data), generator=generator).numpy()
        total, seen = 0.0, 0
        for start in range(0, len(data), self.train_config.batch_size):
            rows = order[start:start + self.train_config.batch_size]
            if len(rows) < 2:
                # a single leftover pair has no negatives
                logger.warning(f"Skipping a leftover batch of {len(rows)} pair")
                continue
            gradients = backward(self.model, data.batch(rows), self.loss_config, self.projector)
            optimizer_step(self.named, gradients.grads, self.optimizer, self.scheduler)
            total += gradients.loss * len(rows)
            seen += len(rows)
        if seen == 0:
            raise DataError(f"no batch of at least 2 pairs in a training set of {len(data)}")
        return total / seen

    def evaluate(self, data: PairedSet) -> Tuple[float, float]:
        """Full-rank top-1 in both directions"""
        outputs = encode(self.model, data.voxels, self.train_config.batch_size)
        report = full_rank_retrieval(
            EmbeddingStore(ids=data.ids, matrix=outputs.reshape(len(data), -1)),
            EmbeddingStore(ids=data.ids, matrix=data.targets.reshape(len(data), -1)),
            top_k=(1,))
        return report.topk['image'][1], report.topk['brain'][1]

    def fit(self, train_set: PairedSet, eval_set: Optional[PairedSet] = None,
            out_dir: Optional[Path] = None) -> TrainResult:
        self._check_shapes(train_set)
        if eval_set is not None:
            self._check_shapes(eval_set)
        generator = seed_everything(self.train_config.seed, self.train_config.threads)
        history = []
        best = (-math.inf, 0)
        best_state = None
        for epoch in range(1, self.train_config.epochs + 1):
            started = time.perf_counter()
            train_loss = self.train_epoch(train_set, generator)
            fwd, bwd = self.evaluate(eval_set) if eval_set is not None else (float('nan'), float('nan'))
            wall = time.perf_counter() - started if self.train_config.record_wall_time else 0.0
            history.append({'epoch': epoch, 'train_loss': train_loss, 'eval_top1_fwd': fwd,
                            'eval_top1_bwd': bwd, 'wall_seconds': wall})
            score = (fwd + bwd) / 2 if eval_set is not None else -train_loss
            if score > best[0]:
                best = (score, epoch)
                best_state = self._snapshot()
            logger.info(f"Epoch {epoch}/{self.train_config.epochs}: loss {train_loss:.5f}, "
                        f"eval top-1 {fwd:.4f}/{bwd:.4f}")
        self._restore(best_state)
        curve = pd.DataFrame(history, columns=LOSS_CURVE_COLUMNS)
        checkpoint_dir = None
        if out_dir is not None:
            out_dir = Path(out_dir)
            out_dir.mkdir(parents=True, exist_ok=True)
            curve.to_csv(out_dir / 'loss_curve.csv', index=False)
            checkpoint_dir = out_dir / 'checkpoint'
            save_checkpoint(checkpoint_dir, self.model, self.loss_config, self.optimizer_config,
                            self.train_config, best_epoch=best[1])
        logger.info(f"Best epoch {best[1]} with score {best[0]:.4f}")
        return TrainResult(curve=curve, best_epoch=best[1], best_score=best[0],
                           checkpoint_dir=checkpoint_dir, history=history)

    def _snapshot(self) -> Dict[str, Dict[str, torch.Tensor]]:
        state = {'model': copy.deepcopy(self.model.state_dict())}
        if self.projector is not None:
            state['projector'] = copy.deepcopy(self.projector.state_dict())
        return state

    def _restore(self, state) -> None:
        self.model.load_state_dict(state['model'])
        if self.projector is not None:
            self.projector.load_state_dict(state['projector'])


def train(train_set: PairedSet, model: DftBackbone, loss_config: LossConfig,
          optimizer_config: OptimizerConfig, train_config: TrainConfig,
          eval_set: Optional[PairedSet] = None, out_dir: Optional[Path] = None,
          projector: Optional[nn.Module] = None) -> TrainResult:
    trainer = Trainer(model, loss_config, optimizer_config, train_config, projector)
    return trainer.fit(train_set, eval_set, out_dir)


def save_checkpoint(directory: Path, model: DftBackbone, loss_config: LossConfig,
                    optimizer_config: OptimizerConfig, train_config: TrainConfig,
                    best_epoch: Optional[int] = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = write_parameters(model, directory)
    manifest = {
        'backbone': model.config.to_dict(),
        'loss': loss_config.to_dict(),
        'optimizer': optimizer_config.to_dict(),
        'train': train_config.to_dict(),
        'seed': train_config.seed,
        'best_epoch': best_epoch,
        'parameters': entries,
    }
    write_json(directory / 'manifest.json', manifest)
    logger.info(f"Saved checkpoint with {len(entries)} tensors to {directory}")
    return directory


def load_checkpoint(directory: Path) -> Tuple[DftBackbone, Dict[str, Any]]:
    directory = Path(directory)
    try:
        manifest = read_json(directory / 'manifest.json')
        model = DftBackbone(BackboneConfig.from_dict(manifest['backbone']), seed=manifest.get('seed', 0))
        read_parameters(model, directory, manifest['parameters'])
        return model, manifest
    except FileNotFoundError as e:
        logger.error(f"Error loading checkpoint {directory}: {str(e)}")
        raise DataError(f"checkpoint {directory} is missing {e.filename}") from e
    except Exception as e:
        logger.error(f"Error loading checkpoint {directory}: {str(e)}")
        raise
