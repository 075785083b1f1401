"""Training loop: flip augmentation, weighted MSE, Adam, plateau decay, early stopping."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .. import preprocess as pp
from ..phantom import read_manifest
from ..targetmap import KernelSpec, build_target_map
from ..volume_io import Checkpoint, read_annotations, read_volume, save_checkpoint
from .loss import weighted_mse_loss
from .model import ArchConfig, NetworkParams, backward_pass, forward_pass, init_params
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.003
    batch_size: int = 4
    max_rounds: int = 500
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_decay_factor: float = 0.5
    lr_patience: int = 5
    early_stop_patience: int = 15
    rng_seed: int = 0
    weight_floor: float = 0.0
    validation_fraction: float = 0.1
    target_scale: float = 1.0
    sigma_mm: tuple[float, float, float] = (1.0, 1.0, 2.0)
    voi_shape: tuple[int, int, int] = pp.DEFAULT_VOI_SHAPE
    voi_spacing_mm: float = pp.DEFAULT_SPACING_MM
    clamp: tuple[float, float] = pp.HU_CLAMP
    # "centroid" of the annotations, or the "volume" centre
    voi_center: str = "centroid"
    augment: bool = True
    backend: str | None = None

    def __post_init__(self):
        if self.batch_size < 1 or self.max_rounds < 1:
            raise ValueError("batch_size and max_rounds must be >= 1")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must lie in [0, 1)")
        if self.voi_center not in ("centroid", "volume"):
            raise ValueError("voi_center must be 'centroid' or 'volume'")
        if not self.learning_rate > 0 or not 0 < self.lr_decay_factor <= 1:
            raise ValueError("learning rate must be positive and decay factor in (0, 1]")
        if self.weight_floor < 0:
            raise ValueError("weight_floor must be non-negative")

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()
                      if k in cls.__dataclass_fields__})


@dataclass
class Sample:
    name: str
    image: np.ndarray  # normalized network input (X, Y, Z)
    target: np.ndarray  # scaled target map (X, Y, Z)
    grid: pp.Volume


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[dict] = field(default_factory=list)
    best_round: int = 0
    stopped_early: bool = False


def prepare_sample(volume, annotations, cfg: TrainConfig, name: str = "") -> Sample:
    """Clamp, resample, crop to the VOI and build the matching target map."""
    if cfg.voi_center == "centroid" and len(annotations):
        center = annotations.points_mm.mean(axis=0)
    else:
        center = pp.volume_center_mm(volume)
    voi = pp.VoiSpec(tuple(center), tuple(cfg.voi_shape), cfg.voi_spacing_mm)
    crop = pp.prepare_input(volume, voi, cfg.clamp)
    target = build_target_map(crop, annotations, KernelSpec(tuple(cfg.sigma_mm)), cfg.target_scale)
    return Sample(name, pp.normalize_intensity(crop, *cfg.clamp), target.data, crop)


def load_samples(manifest, cfg: TrainConfig) -> list[Sample]:
    _, rows = read_manifest(manifest)
    return [prepare_sample(read_volume(r["volume_path"]), read_annotations(r["annotation_path"]), cfg,
                           Path(r["volume_path"]).name) for r in rows]


def split_samples(n: int, cfg: TrainConfig, rng: np.random.Generator) -> tuple[list[int], list[int]]:
    order = rng.permutation(n)
    n_val = int(round(cfg.validation_fraction * n))
    if cfg.validation_fraction > 0:
        n_val = max(1, n_val)
    val = sorted(int(i) for i in order[:n_val])
    train = sorted(int(i) for i in order[n_val:])
    if not train:
        raise ValueError("no training volumes left after the validation split")
    if cfg.validation_fraction > 0 and not val:
        raise ValueError("no validation volumes")
    return train, val


def _flip(arr: np.ndarray, axes) -> np.ndarray:
    return np.flip(arr, axes) if axes else arr


def validation_loss(net: NetworkParams, samples: list[Sample], cfg: TrainConfig) -> float:
    """Voxel-weighted mean loss over whole validation volumes, batch norm in eval mode."""
    total, count = 0.0, 0
    for i in range(0, len(samples), cfg.batch_size):
        chunk = samples[i:i + cfg.batch_size]
        x = np.stack([s.image for s in chunk])[:, None]
        y = np.stack([s.target for s in chunk])[:, None]
        out, _ = forward_pass(net, x, training=False, backend=cfg.backend, keep_cache=False)
        loss, _ = weighted_mse_loss(out, y, cfg.weight_floor)
        total += loss * y.size
        count += y.size
    return total / count


@dataclass
class PlateauSchedule:
    """Halve-on-plateau learning rate with early stopping on the validation loss."""
    lr_patience: int
    decay_factor: float
    stop_patience: int
    best: float = np.inf
    since_best: int = 0
    since_decay: int = 0

    def update(self, val_loss: float, lr: float) -> tuple[bool, float, bool]:
        """Returns (improved, new learning rate, stop)."""
        if val_loss < self.best:
            self.best = val_loss
            self.since_best = self.since_decay = 0
            return True, lr, False
        self.since_best += 1
        self.since_decay += 1
        if self.since_decay >= self.lr_patience:
            lr *= self.decay_factor
            self.since_decay = 0
        return False, lr, self.since_best >= self.stop_patience


def train(samples_or_manifest, arch: ArchConfig, cfg: TrainConfig,
          out_dir=None, validation: list[Sample] | None = None) -> TrainResult:
    """Fit a network; keeps the parameters with the best validation loss.

    ``samples_or_manifest`` is a manifest path or a list of :class:`Sample`.
    Without explicit ``validation`` samples a ``validation_fraction`` of them
    is held out (with fraction 0 the training loss stands in). Each round
    visits every training sample once in batches of ``batch_size``; every
    sample is flipped independently along each axis with probability 1/2.
    """
    seeds = np.random.SeedSequence(cfg.rng_seed).spawn(3)
    init_rng, split_rng, batch_rng = (np.random.default_rng(s) for s in seeds)
    samples = samples_or_manifest
    if not isinstance(samples, list):
        samples = load_samples(samples_or_manifest, cfg)
    if validation is None:
        if len(samples) < 1:
            raise ValueError("need at least one training volume")
        tr_idx, val_idx = split_samples(len(samples), cfg, split_rng)
        train_set = [samples[i] for i in tr_idx]
        val_set = [samples[i] for i in val_idx]
    else:
        train_set, val_set = list(samples), list(validation)
    if not train_set:
        raise ValueError("need at least one training volume")
    shape = tuple(train_set[0].image.shape)
    if any(s.image.shape != shape for s in train_set + val_set):
        raise ValueError("all samples must share the VOI shape")
    arch = ArchConfig(**{**asdict(arch), "input_shape": shape})
    net = init_params(arch, init_rng)
    net.meta = {"target_scale": cfg.target_scale, "clamp": list(cfg.clamp),
                "voi_spacing_mm": cfg.voi_spacing_mm, "sigma_mm": list(cfg.sigma_mm)}
    opt = AdamState(beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)
    lr = cfg.learning_rate
    schedule = PlateauSchedule(cfg.lr_patience, cfg.lr_decay_factor, cfg.early_stop_patience)
    best_state = None
    best_round = 0
    history: list[dict] = []
    stopped = False
    for rnd in range(1, cfg.max_rounds + 1):
        t0 = time.perf_counter()
        order = batch_rng.permutation(len(train_set))
        losses, weights = [], []
        for start in range(0, len(order), cfg.batch_size):
            batch = [train_set[i] for i in order[start:start + cfg.batch_size]]
            xs, ys = [], []
            for s in batch:
                axes = tuple(int(a) for a in np.flatnonzero(batch_rng.random(3) < 0.5)) if cfg.augment else ()
                xs.append(_flip(s.image, axes))
                ys.append(_flip(s.target, axes))
            x = np.stack(xs)[:, None]
            y = np.stack(ys)[:, None]
            out, tape = forward_pass(net, x, training=True, backend=cfg.backend)
            loss, grad = weighted_mse_loss(out, y, cfg.weight_floor)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite training loss in round {rnd}")
            grads = backward_pass(net, tape, grad)
            del tape
            adam_step(net.params, grads, opt, opt.step + 1, lr)
            losses.append(loss)
            weights.append(len(batch))
        train_loss = float(np.average(losses, weights=weights))
        val_loss = validation_loss(net, val_set, cfg) if val_set else train_loss
        if not np.isfinite(val_loss):
            raise TrainingDiverged(f"non-finite validation loss in round {rnd}")
        history.append({"round": rnd, "train_loss": train_loss, "val_loss": val_loss, "lr": lr})
        log.info("round %d  train %.6g  val %.6g  lr %.3g  (%.1fs)", rnd, train_loss, val_loss, lr,
                 time.perf_counter() - t0)
        improved, lr, stop = schedule.update(val_loss, lr)
        if improved:
            best_round = rnd
            best_state = (net.copy(), opt.copy())
        if stop:
            stopped = True
            break
    best_net, best_opt = best_state
    meta = {"rng_seed": cfg.rng_seed, "loss_history": history, "best_round": best_round,
            "stopped_early": stopped, "train_config": cfg.to_dict(),
            "train_samples": [s.name for s in train_set], "validation_samples": [s.name for s in val_set]}
    ckpt = best_net.to_checkpoint(best_opt.to_dict(), meta)
    result = TrainResult(ckpt, history, best_round, stopped)
    if out_dir is not None:
        write_training_outputs(result, out_dir)
    return result


def write_history_csv(history: list[dict], path) -> Path:
    p = Path(path)
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["round", "train_loss", "val_loss", "lr"])
        for h in history:
            w.writerow([h["round"], repr(h["train_loss"]), repr(h["val_loss"]), repr(h["lr"])])
    return p


def write_training_outputs(result: TrainResult, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.checkpoint, out / "model")
    write_history_csv(result.history, out / "loss.csv")
    return out / "model.ckpt.json"
