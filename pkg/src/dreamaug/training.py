"""Cross-entropy plus temperature-smoothed consistency training on dream images."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import autodiff as ad
from . import rng as rngmod
from .dream import SKIP, DreamConfig, build_class_index, sample_style_partner, stylized_dream
from .errors import ConfigError, DataError, NumericError
from .model import Model

log = logging.getLogger(__name__)

MODES = ("erm", "sd_ce", "deepdream_consistency", "sd_consistency")
DIVERGENCES = ("kl", "js", "mse")


@dataclass
class TrainConfig:
    tau: float = 10.0
    divergence: str = "kl"
    # "clean": KL(p_clean || p_sd); "sd": KL(p_sd || p_clean)
    kl_target: str = "clean"
    # "prob": MSE between softmax outputs; "logit": between scaled logits
    mse_space: str = "prob"
    consistency_weight: float = 1.0
    lr: float = 0.004
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 30
    batch_size: int = 64
    seed: int = 0
    mode: str = "sd_consistency"
    dream: DreamConfig = field(default_factory=DreamConfig)

    def validate(self) -> None:
        if not self.tau > 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.consistency_weight < 0:
            raise ConfigError(f"consistency_weight must be >= 0, got {self.consistency_weight}")
        if not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ConfigError("momentum must lie in [0, 1) and weight_decay be >= 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.divergence not in DIVERGENCES:
            raise ConfigError(f"divergence must be one of {DIVERGENCES}, got {self.divergence!r}")
        if self.kl_target not in ("clean", "sd") or self.mse_space not in ("prob", "logit"):
            raise ConfigError("kl_target must be 'clean'|'sd' and mse_space 'prob'|'logit'")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        self.dream.validate()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dream"]["lower_bound"] = list(self.dream.lower_bound)
        d["dream"]["upper_bound"] = list(self.dream.upper_bound)
        return d


@dataclass
class EpochStats:
    ce: float
    cons: float
    acc: float


@dataclass
class TrainReport:
    epochs: List[EpochStats]
    config: dict
    seed: int
    wall_time: float = 0.0
    checkpoint: Optional[str] = None

    def to_json_dict(self) -> dict:
        # wall time is excluded so that reruns serialize byte-identically
        d = {
            "epochs": [asdict(e) for e in self.epochs],
            "config": self.config,
            "seed": self.seed,
        }
        if self.checkpoint is not None:
            d["checkpoint"] = self.checkpoint
        return d


def _kl(log_p: ad.Tensor, log_q: ad.Tensor) -> ad.Tensor:
    p = ad.exp(log_p)
    return ad.mean(ad.tsum(p * (log_p - log_q), axis=1))


def divergence(metric: str, smoothed_sd: ad.Tensor, smoothed_clean: ad.Tensor,
               kl_target: str = "clean", mse_space: str = "prob") -> ad.Tensor:
    """Batch-mean divergence between the prediction distributions of two logit batches.

    Inputs are logits already divided by the temperature. Gradients flow into
    both arguments.
    """
    if metric == "kl":
        log_sd, log_clean = ad.log_softmax(smoothed_sd), ad.log_softmax(smoothed_clean)
        return _kl(log_clean, log_sd) if kl_target == "clean" else _kl(log_sd, log_clean)
    if metric == "js":
        log_sd, log_clean = ad.log_softmax(smoothed_sd), ad.log_softmax(smoothed_clean)
        log_mix = ad.log_mean_exp2(log_sd, log_clean)
        return 0.5 * _kl(log_sd, log_mix) + 0.5 * _kl(log_clean, log_mix)
    if metric == "mse":
        if mse_space == "prob":
            diff = ad.softmax(smoothed_sd) - ad.softmax(smoothed_clean)
        else:
            diff = smoothed_sd - smoothed_clean
        return ad.mean(diff * diff)
    raise ConfigError(f"unknown divergence {metric!r}")


class SGD:
    """SGD with momentum and L2 weight decay folded into the gradient."""

    def __init__(self, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers: Dict[str, np.ndarray] = {}

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
        for name, p in params.items():
            g = grads[name]
            if self.weight_decay:
                g = g + self.weight_decay * p
            if self.momentum:
                buf = self.buffers.get(name)
                buf = g.copy() if buf is None else self.momentum * buf + g
                self.buffers[name] = buf
                g = buf
            params[name] = p - self.lr * g


def _uses_dreams(cfg: TrainConfig) -> bool:
    if cfg.mode == "erm":
        return False
    return cfg.mode == "sd_ce" or cfg.consistency_weight > 0


def _dream_config_for(cfg: TrainConfig) -> DreamConfig:
    if cfg.mode == "deepdream_consistency":
        return DreamConfig(**{**asdict(cfg.dream), "mode": "deepdream"})
    return cfg.dream


def generate_dreams(model: Model, x: np.ndarray, partners: np.ndarray, pool: np.ndarray,
                    cfg: TrainConfig, noise_streams=None) -> np.ndarray:
    """Dream images for a batch; rows whose partner is SKIP are returned unchanged."""
    dcfg = _dream_config_for(cfg)
    skip = partners == SKIP
    style = x.copy()
    if (~skip).any():
        style[~skip] = pool[partners[~skip]]
    out = stylized_dream(model, x, style, dcfg, noise_streams)
    if skip.any():
        out[skip] = x[skip]
    return out


def train_step(model: Model, x: np.ndarray, y: np.ndarray, x_dream: Optional[np.ndarray],
               cfg: TrainConfig, optimizer: SGD) -> dict:
    """One parameter update. ``x_dream`` must already be computed (and detached).

    Returns the loss components and the clean-batch accuracy before the update.
    """
    params = model.tensors(requires_grad=True)
    xt = ad.Tensor(x)
    logits = model.predict_logits(xt, params)
    ce = ad.softmax_ce(logits, y)
    total = ce
    cons_value = 0.0
    if _uses_dreams(cfg) and not (cfg.mode != "sd_ce" and np.array_equal(x_dream, x)):
        # a divergence between identical batches is exactly 0 with zero gradient,
        # so that case is skipped rather than accumulating rounding noise
        logits_dream = model.predict_logits(ad.Tensor(x_dream), params)
        if cfg.mode == "sd_ce":
            cons = ad.softmax_ce(logits_dream, y)
            total = total + cons
        else:
            inv_tau = 1.0 / cfg.tau
            cons = divergence(cfg.divergence, logits_dream * inv_tau, logits * inv_tau,
                              cfg.kl_target, cfg.mse_space)
            total = total + cfg.consistency_weight * cons
        cons_value = cons.item()
    total.backward()
    grads = {k: t.grad if t.grad is not None else np.zeros_like(t.data) for k, t in params.items()}
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name}")
    optimizer.step(model.params, grads)
    acc = float(np.mean(np.argmax(logits.data, axis=1) == y))
    return {"ce": ce.item(), "cons": cons_value, "total": total.item(), "acc": acc}


def train(model: Model, images: np.ndarray, labels: np.ndarray, cfg: TrainConfig,
          progress: bool = False) -> tuple:
    """Train ``model`` in place on normalized ``images``; returns (model, TrainReport).

    Style partners are drawn from the whole training pool, i.e. the union of
    all source domains passed in.
    """
    cfg.validate()
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0:
        raise DataError("training set is empty")
    num_classes = model.arch.num_classes
    class_index = build_class_index(labels, num_classes)
    optimizer = SGD(cfg.lr, cfg.momentum, cfg.weight_decay)
    n = len(images)
    epochs: List[EpochStats] = []
    start = time.perf_counter()
    for epoch in range(cfg.epochs):
        order = rngmod.stream(cfg.seed, rngmod.SHUFFLE, epoch).permutation(n)
        sums = {"ce": 0.0, "cons": 0.0, "acc": 0.0}
        for b, lo in enumerate(range(0, n, cfg.batch_size)):
            idx = order[lo:lo + cfg.batch_size]
            x, y = images[idx], labels[idx]
            x_dream = None
            if _uses_dreams(cfg):
                partners = sample_style_partner(idx, y, class_index,
                                                rngmod.stream(cfg.seed, rngmod.PARTNER, epoch, b))
                noise = None
                if cfg.dream.noise_bound > 0:
                    noise = [rngmod.stream(cfg.seed, rngmod.DREAM_NOISE, epoch, int(i)) for i in idx]
                x_dream = generate_dreams(model, x, partners, images, cfg, noise)
            try:
                out = train_step(model, x, y, x_dream, cfg, optimizer)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch} batch {b}: {exc}") from exc
            if not (np.isfinite(out["ce"]) and np.isfinite(out["cons"])):
                raise NumericError(f"epoch {epoch} batch {b}: non-finite loss ce={out['ce']} cons={out['cons']}")
            for k in sums:
                sums[k] += out[k] * len(idx)
        stats = EpochStats(sums["ce"] / n, sums["cons"] / n, sums["acc"] / n)
        epochs.append(stats)
        msg = "epoch %d/%d ce=%.4f cons=%.4f acc=%.3f (%.1fs)"
        args = (epoch + 1, cfg.epochs, stats.ce, stats.cons, stats.acc, time.perf_counter() - start)
        (log.info if progress else log.debug)(msg, *args)
    report = TrainReport(epochs, cfg.to_dict(), cfg.seed, time.perf_counter() - start)
    return model, report
