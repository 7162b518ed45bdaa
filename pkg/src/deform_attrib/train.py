"""Adversarial training of the generator against a WGAN-GP critic.

Before every generator update the critic is updated ``ratio`` times, where
``ratio`` comes from the mode's schedule: 100 throughout for the
deformation generator, and 100 for the first 25 generator updates then 5
for the additive baseline. An epoch is one pass of generator updates over
the class-1 training images; validation NCC is computed after each epoch
and the best epoch is checkpointed.
"""

from __future__ import annotations

import csv
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import diffcore, losses
from .evaluation import evaluate
from .models import (
    Critic, CriticConfig, GeneratorConfig, UNetGenerator, load_state, modify,
    read_manifest, save_checkpoint,
)

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "critic_loss", "grad_penalty", "gen_adv", "gen_reg", "val_ncc", "wall_time_s")
DEFAULT_SCHEDULES = {"defi": "100", "vagan": "100@25,5"}
DEFAULT_LAMBDA_REG_G = {"defi": 10.0, "vagan": 100.0}


class NumericAbort(RuntimeError):
    """A loss became NaN or infinite; ``snapshot`` holds the offending state."""

    def __init__(self, message, snapshot):
        super().__init__(message)
        self.snapshot = snapshot


def parse_schedule(text: str) -> list[tuple[int, int | None]]:
    """Parse ``"100@25,5"`` into ``[(100, 25), (5, None)]``.

    Each stage is ``ratio@count``; the last stage has no count and lasts
    forever.
    """
    stages = []
    parts = [p.strip() for p in str(text).split(",") if p.strip()]
    if not parts:
        raise ValueError("empty critic schedule")
    for i, part in enumerate(parts):
        ratio, _, count = part.partition("@")
        r = int(ratio)
        c = int(count) if count else None
        if r <= 0 or (c is not None and c <= 0):
            raise ValueError(f"schedule entries must be positive: {part!r}")
        if (c is None) != (i == len(parts) - 1):
            raise ValueError(f"only the last schedule stage may omit its length: {text!r}")
        stages.append((r, c))
    return stages


def critic_ratio(stages, generator_update: int) -> int:
    """Critic updates preceding the 1-based ``generator_update``."""
    seen = 0
    for ratio, count in stages:
        if count is None or generator_update <= seen + count:
            return ratio
        seen += count
    raise AssertionError("unreachable")


def critic_updates_before(stages, completed_generator_updates: int) -> int:
    return sum(critic_ratio(stages, k) for k in range(1, completed_generator_updates + 1))


@dataclass
class TrainConfig:
    mode: str = "defi"
    learning_rate: float = 1e-4
    beta1: float = 0.0
    beta2: float = 0.9
    lambda_reg_g: float | None = None
    lambda_reg_d: float = 10.0
    schedule: str | None = None
    batch_size: int = 16
    epochs: int = 10
    max_generator_updates: int | None = None
    seed: int = 0
    depth: int = 3
    base_channels: int = 16
    final_layer_scale: float = 1.0
    critic_channels: str = "8,8,16,16,32,32"
    critic_strides: str = "2,1,2,1,2,1"
    leaky_slope: float = diffcore.LEAKY_SLOPE

    def __post_init__(self):
        if self.mode not in DEFAULT_SCHEDULES:
            raise ValueError(f"mode must be 'defi' or 'vagan', got {self.mode!r}")
        if self.lambda_reg_g is None:
            self.lambda_reg_g = DEFAULT_LAMBDA_REG_G[self.mode]
        if self.schedule is None:
            self.schedule = DEFAULT_SCHEDULES[self.mode]
        parse_schedule(self.schedule)
        losses.LossWeights(self.lambda_reg_g, self.lambda_reg_d)
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")

    @property
    def weights(self) -> losses.LossWeights:
        return losses.LossWeights(self.lambda_reg_g, self.lambda_reg_d)

    def generator_config(self, ndim: int) -> GeneratorConfig:
        return GeneratorConfig(
            ndim=ndim, depth=self.depth, base_channels=self.base_channels,
            output_mode="field" if self.mode == "defi" else "additive_map",
            final_layer_scale=self.final_layer_scale, leaky_slope=self.leaky_slope,
        )

    def critic_config(self, ndim: int) -> CriticConfig:
        ints = lambda s: [int(v) for v in str(s).split(",")]  # noqa: E731
        return CriticConfig(ndim=ndim, channels=ints(self.critic_channels),
                            strides=ints(self.critic_strides), leaky_slope=self.leaky_slope)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class TrainState:
    critic_updates: int = 0
    generator_updates: int = 0
    epoch: int = 0
    best_val_ncc: float = -math.inf
    best_epoch: int = -1
    history: list = field(default_factory=list)


@dataclass
class CriticRecord:
    critic_loss: float
    grad_penalty: float
    total: float


@dataclass
class GeneratorRecord:
    adv: float
    reg: float
    total: float


def _threads_from_env() -> None:
    cap = os.environ.get("DEFORM_ATTRIB_THREADS")
    if cap:
        torch.set_num_threads(max(1, int(cap)))


class Trainer:
    """Owns both networks, their optimizers, and the sampling streams.

    ``train0`` / ``train1`` are arrays of class-0 and class-1 training
    images shaped ``(N, *S)``; ``val_pairs`` are
    :class:`~deform_attrib.evaluation.PairedSample` objects.
    """

    def __init__(self, cfg: TrainConfig, train0, train1, val_pairs=(), run_dir=None):
        if len(train0) == 0 or len(train1) == 0:
            raise ValueError("training needs images of both classes")
        _threads_from_env()
        self.cfg = cfg
        self.stages = parse_schedule(cfg.schedule)
        self.x0_all = torch.from_numpy(np.asarray(train0, dtype=np.float32))[:, None]
        self.x1_all = torch.from_numpy(np.asarray(train1, dtype=np.float32))[:, None]
        ndim = self.x0_all.dim() - 2
        self.val_pairs = list(val_pairs)
        self.run_dir = Path(run_dir) if run_dir is not None else None

        torch.manual_seed(cfg.seed)
        self.generator = UNetGenerator(cfg.generator_config(ndim))
        self.critic = Critic(cfg.critic_config(ndim))
        self.generator.cfg.check_input(self.x0_all.shape[2:])
        betas = (float(cfg.beta1), float(cfg.beta2))
        self.opt_g = torch.optim.Adam(self.generator.parameters(), lr=cfg.learning_rate, betas=betas)
        self.opt_d = torch.optim.Adam(self.critic.parameters(), lr=cfg.learning_rate, betas=betas)
        self.np_rng = np.random.default_rng(cfg.seed)
        self.torch_rng = torch.Generator().manual_seed(cfg.seed)
        self.state = TrainState()
        self._fake_cache = None

    # -- sampling ----------------------------------------------------------

    def _indices(self, n):
        return torch.from_numpy(self.np_rng.integers(0, n, self.cfg.batch_size))

    def _fake_batch(self):
        idx = self._indices(len(self.x1_all))
        if self._fake_cache is not None:
            return self._fake_cache[idx]
        with torch.no_grad():
            return modify(self.generator, self.x1_all[idx])[0]

    def _refresh_cache(self, ratio):
        # the generator is frozen for the next `ratio` critic updates; when
        # those would touch more images than exist, modify each image once
        self._fake_cache = None
        if ratio * self.cfg.batch_size >= len(self.x1_all):
            with torch.no_grad():
                self._fake_cache = torch.cat([
                    modify(self.generator, self.x1_all[i:i + 64])[0]
                    for i in range(0, len(self.x1_all), 64)
                ])

    # -- steps ---------------------------------------------------------------

    def critic_step(self, x0=None, x_hat0=None) -> CriticRecord:
        if x0 is None:
            x0 = self.x0_all[self._indices(len(self.x0_all))]
        if x_hat0 is None:
            x_hat0 = self._fake_batch()
        x_hat0 = x_hat0.detach()
        self.critic.requires_grad_(True)
        self.opt_d.zero_grad(set_to_none=False)
        ld = losses.critic_loss(self.critic(x0), self.critic(x_hat0))
        gp = losses.gradient_penalty(self.critic, x0, x_hat0, self.torch_rng)
        total = losses.critic_objective(ld, gp, self.cfg.weights)
        self._check("critic", total, critic_loss=ld, grad_penalty=gp)
        diffcore.backward(total)
        self.opt_d.step()
        self.state.critic_updates += 1
        return CriticRecord(ld.item(), gp.item(), total.item())

    def generator_step(self, x1=None) -> GeneratorRecord:
        if x1 is None:
            x1 = self.x1_all[self._indices(len(self.x1_all))]
        self.critic.requires_grad_(False)
        self.opt_g.zero_grad(set_to_none=False)
        x_hat0, out = modify(self.generator, x1)
        adv = losses.generator_adv_loss(self.critic(x_hat0))
        if self.cfg.mode == "defi":
            reg = losses.tv_penalty(out)
        else:
            reg = losses.l1_map_penalty(x1, x_hat0)
        total = losses.generator_objective(adv, reg, self.cfg.weights)
        self._check("generator", total, gen_adv=adv, gen_reg=reg)
        diffcore.backward(total)
        self.opt_g.step()
        self.critic.requires_grad_(True)
        self.state.generator_updates += 1
        return GeneratorRecord(adv.item(), reg.item(), total.item())

    def _check(self, which, total, **parts):
        if torch.isfinite(total).item():
            return
        snapshot = {
            "which": which,
            "critic_updates": self.state.critic_updates,
            "generator_updates": self.state.generator_updates,
            "epoch": self.state.epoch,
            **{k: float(v.item()) for k, v in parts.items()},
        }
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)
            (self.run_dir / "nan_snapshot.txt").write_text(
                "".join(f"{k}={v}\n" for k, v in snapshot.items())
            )
        raise NumericAbort(f"non-finite {which} loss at {snapshot}", snapshot)

    def generator_round(self):
        """One generator update preceded by the scheduled critic updates."""
        k = self.state.generator_updates + 1
        ratio = critic_ratio(self.stages, k)
        self._refresh_cache(ratio)
        crit = [self.critic_step() for _ in range(ratio)]
        self._fake_cache = None
        gen = self.generator_step()
        assert self.state.critic_updates == critic_updates_before(self.stages, self.state.generator_updates)
        return crit, gen

    # -- loop ------------------------------------------------------------------

    @property
    def updates_per_epoch(self) -> int:
        return math.ceil(len(self.x1_all) / self.cfg.batch_size)

    def validation_ncc(self) -> float:
        if not self.val_pairs:
            return float("nan")
        return evaluate(self.generator, self.val_pairs).mean

    def fit(self) -> TrainState:
        if not self.val_pairs and self.run_dir is not None:
            raise ValueError("validation set has no pairs")
        start = time.perf_counter()
        for epoch in range(1, self.cfg.epochs + 1):
            self.state.epoch = epoch
            crit, gen = [], []
            for _ in range(self.updates_per_epoch):
                if self._budget_spent():
                    break
                c, g = self.generator_round()
                crit.extend(c)
                gen.append(g)
            if not gen:
                break
            val = self.validation_ncc()
            row = {
                "epoch": epoch,
                "critic_loss": float(np.mean([r.critic_loss for r in crit])),
                "grad_penalty": float(np.mean([r.grad_penalty for r in crit])),
                "gen_adv": float(np.mean([r.adv for r in gen])),
                "gen_reg": float(np.mean([r.reg for r in gen])),
                "val_ncc": val,
                "wall_time_s": time.perf_counter() - start,
            }
            self.state.history.append(row)
            log.info("epoch %d: %s", epoch, row)
            if np.isfinite(val) and val > self.state.best_val_ncc:
                self.state.best_val_ncc = val
                self.state.best_epoch = epoch
                if self.run_dir is not None:
                    self.save(self.run_dir / "best", epoch, val)
            if self.run_dir is not None:
                write_metrics(self.run_dir / "metrics.csv", self.state.history)
        return self.state

    def _budget_spent(self) -> bool:
        cap = self.cfg.max_generator_updates
        return cap is not None and self.state.generator_updates >= cap

    def save(self, path, epoch, val_ncc) -> None:
        save_checkpoint(path, {"generator": self.generator, "critic": self.critic}, {
            "mode": self.cfg.mode,
            "epoch": epoch,
            "val_ncc": val_ncc,
            "train_config": asdict(self.cfg),
            "generator_config": asdict(self.generator.cfg),
            "critic_config": asdict(self.critic.cfg),
            "critic_updates": self.state.critic_updates,
            "generator_updates": self.state.generator_updates,
        })


def write_metrics(path, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for row in history:
            w.writerow([row["epoch"]] + [repr(float(row[c])) for c in METRIC_COLUMNS[1:]])


def load_generator(path) -> UNetGenerator:
    """Rebuild the generator stored in a checkpoint directory."""
    manifest = read_manifest(path)
    gen = UNetGenerator(GeneratorConfig(**manifest["generator_config"]))
    load_state(path, gen, "generator")
    gen.eval()
    return gen
