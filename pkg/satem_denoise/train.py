import logging
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Any, DefaultDict, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from .config import merge_params
from .model import (
    ClubNet,
    DenoisingModel,
    FactorPair,
    ModelConfig,
    load_training_state,
    save_checkpoint,
)
from .numerics import (
    NonFiniteError,
    Tensor,
    backward,
    exp,
    global_norm,
    log,
    mean,
    reshape,
    square,
    sum_,
    variance,
    zero_grad,
)

logger = logging.getLogger(__name__)

VALID_KL_TARGETS = ["content_of_clean", "context_of_clean"]
LOSS_COLUMNS = ["step", "L_clean", "L_noise", "L_kl", "L_club", "total"]

# smallest standard deviation the KL term accepts
SIGMA_FLOOR = 1e-6
LOG_2PI = math.log(2.0 * math.pi)


def nan() -> float:
    return np.nan


def values_factory() -> DefaultDict:
    return defaultdict(nan)


@dataclass
class TrainConfig(object):
    """
    Training and architecture hyperparameters

    Build with ``TrainConfig.from_params`` to start from the packaged defaults.
    """

    n_blocks: int
    channels: int
    factor_dim: Optional[int]
    cover_length: int
    padding: str
    hidden_mult: int
    club_hidden: int
    batch_size: int
    lr: float
    epochs: int
    lambda_clean: float
    lambda_noise: float
    lambda_kl: float
    lambda_club: float
    kl_target: str
    beta1: float
    beta2: float
    adam_eps: float
    weight_decay: float
    grad_clip: float
    club_lr: float
    checkpoint_every: int
    seed: int

    def __post_init__(self):
        if self.kl_target not in VALID_KL_TARGETS:
            raise ValueError(
                f"Invalid KL target: {self.kl_target}, expected one of {VALID_KL_TARGETS}"
            )
        for name in ("lambda_clean", "lambda_noise", "lambda_kl", "lambda_club"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0, got {getattr(self, name)}")
        if self.lr <= 0:
            raise ValueError(f"learning rate must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")

    @classmethod
    def from_params(cls, params: Optional[Dict[str, Any]] = None) -> "TrainConfig":
        return cls(**merge_params("train", params))

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            n_blocks=self.n_blocks,
            channels=self.channels,
            factor_dim=self.factor_dim,
            cover_length=self.cover_length,
            padding=self.padding,
            hidden_mult=self.hidden_mult,
            club_hidden=self.club_hidden,
            seed=self.seed,
        )

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class OptState(object):
    """
    AdamW moment estimates keyed by parameter name
    """

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def to_tensors(self, prefix: str) -> Dict[str, np.ndarray]:
        out = {f"{prefix}.m.{k}": v for k, v in self.m.items()}
        out.update({f"{prefix}.v.{k}": v for k, v in self.v.items()})
        return out

    def load_tensors(self, prefix: str, tensors: Dict[str, np.ndarray]):
        for key, values in tensors.items():
            if key.startswith(f"{prefix}.m."):
                self.m[key[len(prefix) + 3:]] = values.copy()
            elif key.startswith(f"{prefix}.v."):
                self.v[key[len(prefix) + 3:]] = values.copy()


def adamw_step(params: Dict[str, Tensor], opt: OptState, lr: float):
    """one AdamW update in place

    Decoupled weight decay is applied to the parameter before the
    bias-corrected moment update. Parameters without a gradient are skipped.
    """
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NonFiniteError(f"non-finite gradient for parameter {name}")

    opt.step += 1
    correction1 = 1.0 - opt.beta1 ** opt.step
    correction2 = 1.0 - opt.beta2 ** opt.step
    for name, p in params.items():
        if p.grad is None:
            continue
        g = p.grad
        m = opt.m.setdefault(name, np.zeros_like(p.data))
        v = opt.v.setdefault(name, np.zeros_like(p.data))

        p.data *= 1.0 - lr * opt.weight_decay
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        p.data -= lr * (m / correction1) / (np.sqrt(v / correction2) + opt.eps)


def clip_grad_norm(params: Dict[str, Tensor], max_norm: float) -> float:
    """rescale gradients so their global norm is at most ``max_norm``"""
    norm = global_norm(params.values())
    if max_norm > 0 and norm > max_norm:
        for p in params.values():
            if p.grad is not None:
                p.grad *= max_norm / norm
    return norm


# --------- losses --------- #
def _mse(pred: Tensor, target) -> Tensor:
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match target {target.shape}")
    return mean(square(pred - target))


def loss_clean(pred: Tensor, s) -> Tensor:
    """mean squared error of the denoising decoder against the clean signal"""
    return _mse(pred, s)


def loss_noise(pred: Tensor, noisy) -> Tensor:
    """mean squared error of the representation decoder against the noisy signal"""
    return _mse(pred, noisy)


def loss_kl(z: Tensor) -> Tensor:
    """mu^2 + sigma^2 - log(sigma^2) - 1 over all elements of ``z``"""
    if z.data.size < 2:
        raise ValueError("KL term needs at least two factor elements")
    mu = mean(z)
    var = variance(z)
    if var.item() < SIGMA_FLOOR ** 2:
        logger.warning(
            "factor variance %.3g below floor, clamping sigma to %g", var.item(), SIGMA_FLOOR
        )
        var = Tensor(SIGMA_FLOOR ** 2)
    return square(mu) + var - log(var) - 1.0


def _flatten(z) -> Tensor:
    z = z if isinstance(z, Tensor) else Tensor(z)
    return reshape(z, (-1, z.shape[-1])) if z.ndim != 2 else z


def club_log_likelihood(z_s, z_n, club: ClubNet) -> Tensor:
    """mean log q(z_n | z_s) over paired samples"""
    z_s, z_n = _flatten(z_s), _flatten(z_n)
    mu, logvar = club.conditional(z_s)
    per_dim = square(mu - z_n) * exp(-logvar) + logvar + LOG_2PI
    return mean(sum_(per_dim, axis=-1)) * -0.5


def club_estimate(z_s, z_n, club: ClubNet) -> Tensor:
    """contrastive log-ratio upper bound of I(z_s; z_n)

    Mean log q over matched pairs minus the mean over all mismatched pairs
    (i != j); the mismatched mean is evaluated in closed form from the first
    two moments of ``z_n``.
    """
    z_s, z_n = _flatten(z_s), _flatten(z_n)
    n = z_s.shape[0]
    if n < 2 or z_n.shape[0] != n:
        raise ValueError(f"CLUB needs at least two paired samples, got {z_s.shape} and {z_n.shape}")

    mu, logvar = club.conditional(z_s)
    inv_var = exp(-logvar)
    matched = square(mu - z_n)
    all_pairs = square(mu) - 2.0 * mu * mean(z_n, axis=0, keepdims=True)
    all_pairs = all_pairs + mean(square(z_n), axis=0, keepdims=True)
    mismatched = (all_pairs * float(n) - matched) * (1.0 / (n - 1))
    positive = sum_(matched * inv_var, axis=-1) * -0.5
    negative = sum_(mismatched * inv_var, axis=-1) * -0.5
    return mean(positive - negative)


def club_fit_step(z_s, z_n, club: ClubNet, opt: OptState, lr: float) -> float:
    """one ascent step on the log-likelihood of q, on detached factors

    Returns the log-likelihood before the step.
    """
    z_s = z_s.detach() if isinstance(z_s, Tensor) else Tensor(z_s)
    z_n = z_n.detach() if isinstance(z_n, Tensor) else Tensor(z_n)
    params = club.named_parameters()
    zero_grad(params.values())
    ll = club_log_likelihood(z_s, z_n, club)
    backward(-ll)
    adamw_step(params, opt, lr)
    zero_grad(params.values())
    return ll.item()


@dataclass
class Trainer(object):
    """
    Runs the three-term objective (plus the optional CLUB penalty) with AdamW

    Parameters
    ----------
    model : DenoisingModel
    config : TrainConfig
    """

    model: DenoisingModel
    config: TrainConfig
    opt: Optional[OptState] = None
    club_opt: Optional[OptState] = None
    step: int = 0
    epoch: int = 0
    history: List[Dict[str, float]] = field(default_factory=list, repr=False)
    values: DefaultDict[str, float] = field(default_factory=values_factory, init=False, repr=False)

    def __post_init__(self):
        cfg = self.config
        if self.opt is None:
            self.opt = OptState(cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
        if self.club_opt is None:
            self.club_opt = OptState(cfg.beta1, cfg.beta2, cfg.adam_eps, weight_decay=0.0)

    @classmethod
    def from_config(cls, config: TrainConfig) -> "Trainer":
        return cls(DenoisingModel.initialize(config.model_config()), config)

    @property
    def series(self):
        """ return a pandas.Series view of the latest epoch statistics """
        return pd.Series(self.values)

    def loss_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.history, columns=LOSS_COLUMNS)

    def batch_losses(
        self, clean: np.ndarray, noisy: np.ndarray
    ) -> Tuple[Dict[str, Tensor], FactorPair]:
        """every loss term for one batch of normalized (clean, noisy) pairs

        Also returns the factors of the noisy input, which the CLUB net is fit on.
        """
        cfg, model = self.config, self.model
        if clean.shape != noisy.shape:
            raise ValueError(f"clean {clean.shape} and noisy {noisy.shape} batches differ")
        noisy_f = model.encode(noisy)  # Z_s^1, Z_n^1
        clean_f = model.encode(clean)  # Z_s^2, Z_n^2

        terms = {
            "L_clean": loss_clean(model.decode_signal(noisy_f.z_s, clean_f.z_n), clean),
            "L_noise": loss_noise(model.decode_repr(clean_f.z_s, noisy_f.z_n), noisy),
        }
        kl_factor = clean_f.z_n if cfg.kl_target == "context_of_clean" else clean_f.z_s
        terms["L_kl"] = loss_kl(kl_factor)
        if cfg.lambda_club > 0:
            terms["L_club"] = club_estimate(noisy_f.z_s, noisy_f.z_n, model.club.detached())
        return terms, noisy_f

    def weights(self) -> Dict[str, float]:
        cfg = self.config
        return {
            "L_clean": cfg.lambda_clean,
            "L_noise": cfg.lambda_noise,
            "L_kl": cfg.lambda_kl,
            "L_club": cfg.lambda_club,
        }

    def train_step(
        self, clean: np.ndarray, noisy: np.ndarray, batch_index: int = 0
    ) -> Dict[str, float]:
        """forward, backward and one optimizer step on a batch"""
        cfg, model = self.config, self.model
        try:
            terms, noisy_f = self.batch_losses(clean, noisy)
        except NonFiniteError as exc:
            raise NonFiniteError(f"batch {batch_index}: {exc}") from exc

        total: Optional[Tensor] = None
        for name, value in terms.items():
            weight = self.weights()[name]
            if weight > 0:
                total = value * weight if total is None else total + value * weight

        row = {name: terms[name].item() if name in terms else 0.0 for name in LOSS_COLUMNS[1:-1]}
        row["total"] = total.item() if total is not None else 0.0
        if not np.isfinite(row["total"]):
            raise NonFiniteError(f"non-finite loss at batch {batch_index}")

        params = model.trainable()
        if total is None:
            logger.warning("all loss weights are zero, skipping optimizer step")
        else:
            zero_grad(params.values())
            backward(total)
            clip_grad_norm(params, cfg.grad_clip)
            adamw_step(params, self.opt, cfg.lr)
            zero_grad(params.values())
            model.clamp_mix()
            if cfg.lambda_club > 0:
                club_fit_step(noisy_f.z_s, noisy_f.z_n, model.club, self.club_opt, cfg.club_lr)

        self.step += 1
        row["step"] = self.step
        self.history.append(row)
        logger.debug("step %d: %s", self.step, row)
        return row

    def train_epoch(self, clean: np.ndarray, noisy: np.ndarray):
        """one shuffled pass over normalized (clean, noisy) arrays shaped (N, T)"""
        clean = np.asarray(clean, dtype=np.float64)
        noisy = np.asarray(noisy, dtype=np.float64)
        if len(clean) == 0:
            raise ValueError("cannot train on an empty dataset")

        rng = np.random.default_rng([self.config.seed, self.epoch])
        order = rng.permutation(len(clean))
        rows = []
        for b, start in enumerate(range(0, len(order), self.config.batch_size)):
            idx = order[start:start + self.config.batch_size]
            rows.append(self.train_step(clean[idx], noisy[idx], batch_index=b))

        self.epoch += 1
        stats = pd.DataFrame(rows).mean()
        self.values.clear()
        for name in LOSS_COLUMNS[1:]:
            self.values[name] = float(stats[name])
        self.values["epoch"] = self.epoch
        self.values["step"] = self.step
        logger.info("epoch %d: %s", self.epoch, dict(self.values))
        return self

    # --------- persistence --------- #
    def save(self, path: str, extra_meta: Optional[Dict[str, Any]] = None):
        tensors = self.opt.to_tensors("adam")
        tensors.update(self.club_opt.to_tensors("club_adam"))
        meta = {
            **(extra_meta or {}),
            "step": self.step,
            "epoch": self.epoch,
            "opt_step": self.opt.step,
            "club_opt_step": self.club_opt.step,
            "train": self.config.to_dict(),
        }
        save_checkpoint(self.model, path, extra_tensors=tensors, meta=meta)

    @classmethod
    def resume(cls, path: str, config: Optional[TrainConfig] = None) -> "Trainer":
        """continue from a checkpoint, keeping its step counter and AdamW state"""
        model, extra, meta = load_training_state(path)
        if config is None:
            config = TrainConfig.from_params(meta.get("train", {}))
        trainer = cls(model, config, step=meta.get("step", 0), epoch=meta.get("epoch", 0))
        trainer.opt.load_tensors("adam", extra)
        trainer.opt.step = meta.get("opt_step", 0)
        trainer.club_opt.load_tensors("club_adam", extra)
        trainer.club_opt.step = meta.get("club_opt_step", 0)
        return trainer


def train_epoch(clean: np.ndarray, noisy: np.ndarray, trainer: Trainer) -> Dict[str, float]:
    """run one epoch and return its mean per-term losses"""
    return dict(trainer.train_epoch(clean, noisy).values)
