"""Deterministic SGD with momentum and the parent -> fork -> children protocol."""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import __version__
from .checkpoint import encode
from .errors import ConfigError, DivergenceError, NumericError
from .net import DatasetSlice, Network
from .params import ParamVector

THREADS_ENV = "LMCRIDGE_THREADS"


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sha256_hex(data) -> str:
    if isinstance(data, str):
        data = data.encode()
    return hashlib.sha256(data).hexdigest()


def checkpoint_hash(theta: ParamVector) -> str:
    return sha256_hex(encode(theta))


def thread_count() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 128
    lr: float = 0.1
    lr_decay_epochs: tuple = ()
    lr_decay_factor: float = 10.0
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "lr_decay_epochs", tuple(int(e) for e in self.lr_decay_epochs))
        if not self.lr >= 0:
            raise ConfigError(f"lr must be non-negative, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.lr_decay_factor <= 0:
            raise ConfigError("lr_decay_factor must be positive")
        d = self.lr_decay_epochs
        if any(b <= a for a, b in zip(d, d[1:])):
            raise ConfigError("lr_decay_epochs must be strictly increasing")
        if d and (d[0] < 0 or d[-1] >= self.epochs):
            raise ConfigError("lr_decay_epochs must lie in [0, epochs)")
        if self.seed < 0:
            raise ConfigError("seed must be unsigned")

    def lr_at(self, epoch: int) -> float:
        drops = sum(1 for e in self.lr_decay_epochs if e <= epoch)
        return self.lr / self.lr_decay_factor**drops

    def to_json(self) -> dict:
        d = asdict(self)
        d["lr_decay_epochs"] = list(self.lr_decay_epochs)
        return d


@dataclass(frozen=True)
class ForkSpec:
    fork_epoch: int
    child_seeds: tuple = (1, 2)
    child_epochs: int = 30
    checkpoint_every: int = 1

    def __post_init__(self):
        object.__setattr__(self, "child_seeds", tuple(int(s) for s in self.child_seeds))
        if len(self.child_seeds) != 2:
            raise ConfigError("a fork needs exactly two child seeds")
        if self.fork_epoch < 0 or self.child_epochs < 1 or self.checkpoint_every < 1:
            raise ConfigError("fork_epoch >= 0, child_epochs >= 1, checkpoint_every >= 1 required")

    def to_json(self) -> dict:
        d = asdict(self)
        d["child_seeds"] = list(self.child_seeds)
        return d


class Trajectory(dict):
    """epoch -> ParamVector, plus the full-data gradient norm at the end."""

    final_grad_norm: float = float("nan")
    final_loss: float = float("nan")

    @property
    def final(self) -> ParamVector:
        return self[max(self)]


def shuffle_order(seed: int, epoch: int, n: int) -> np.ndarray:
    key = np.array([seed, epoch], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key)).permutation(n)


def train(net: Network, init: ParamVector, data: DatasetSlice, cfg: TrainConfig,
          epochs: int | None = None, start_epoch: int = 0, checkpoint_every: int = 1) -> Trajectory:
    """Run SGD for ``epochs`` epochs (default ``cfg.epochs``).

    Checkpoint keys count epochs completed in this call; key 0 is ``init``.
    The step-size schedule and the shuffle key use the global epoch
    ``start_epoch + k`` so a resumed or forked run continues the parent's clock.
    """
    if init.layout != net.layout:
        raise ConfigError("initial parameters do not match the network layout")
    epochs = cfg.epochs if epochs is None else epochs
    n = len(data)
    theta = init.values.copy()
    buf = np.zeros_like(theta)
    traj = Trajectory({0: init})
    for k in range(epochs):
        epoch = start_epoch + k
        lr = cfg.lr_at(epoch)
        order = shuffle_order(cfg.seed, epoch, n)
        for b, a in enumerate(range(0, n, cfg.batch_size)):
            batch = data.take(order[a : a + cfg.batch_size])
            try:
                _, g = net.loss_and_gradient(init.like(theta), batch)
            except NumericError as exc:
                raise DivergenceError(f"training diverged at epoch {epoch}, batch {b}: {exc}",
                                      epoch, b) from exc
            step = g.values
            if cfg.weight_decay:
                step = step + cfg.weight_decay * theta
            if cfg.momentum:
                buf = cfg.momentum * buf + step
                step = buf
            theta = theta - lr * step
            if not np.all(np.isfinite(theta)):
                raise DivergenceError(f"parameters became non-finite at epoch {epoch}, batch {b}",
                                      epoch, b)
        if (k + 1) % checkpoint_every == 0 or k + 1 == epochs:
            traj[k + 1] = init.like(theta)
    final = init.like(theta)
    traj.final_loss, g = net.loss_and_gradient(final, data)
    traj.final_grad_norm = g.norm()
    return traj


@dataclass
class ForkedRun:
    parent_checkpoints: dict
    child1_checkpoints: dict
    child2_checkpoints: dict
    config: TrainConfig
    fork: ForkSpec
    manifest: dict = field(default_factory=dict)

    @property
    def fork_point(self) -> ParamVector:
        return self.parent_checkpoints[self.fork.fork_epoch]

    @property
    def finals(self) -> tuple[ParamVector, ParamVector]:
        return self.child1_checkpoints[max(self.child1_checkpoints)], \
            self.child2_checkpoints[max(self.child2_checkpoints)]

    def child_epochs(self) -> list[int]:
        return sorted(set(self.child1_checkpoints) & set(self.child2_checkpoints))


def run_manifest(net, data, cfg, fork=None, extra=None) -> dict:
    identity = {"network": net.describe(), "train": cfg.to_json(),
                "fork": fork.to_json() if fork else None, "dataset": data.id}
    m = {
        "config_hash": sha256_hex(canonical_json(identity))[:16],
        "dataset_id": data.id,
        "code_version": __version__,
        "train": cfg.to_json(),
    }
    if fork is not None:
        m["fork"] = fork.to_json()
    if extra:
        m.update(extra)
    return m


def train_parent(net, data, cfg, epochs, init=None) -> Trajectory:
    init = net.init_params(cfg.seed) if init is None else init
    return train(net, init, data, cfg, epochs=epochs)


def child_config(cfg: TrainConfig, fork: ForkSpec, seed: int) -> TrainConfig:
    """Children restart the step-size schedule on their own epoch clock."""
    return replace(cfg, seed=seed, epochs=fork.child_epochs,
                   lr_decay_epochs=tuple(e for e in cfg.lr_decay_epochs if e < fork.child_epochs))


def fork_and_train(net: Network, data: DatasetSlice, cfg: TrainConfig, fork: ForkSpec,
                   init: ParamVector | None = None, parent: Trajectory | None = None,
                   force: bool = False) -> ForkedRun:
    """Train a parent to ``fork.fork_epoch`` and two children from there.

    Children use ``cfg`` unchanged except for the shuffle seed and run
    length, starting with a zero momentum buffer. Equal child seeds are
    rejected unless ``force`` is set.
    """
    if fork.child_seeds[0] == fork.child_seeds[1] and not force:
        raise ConfigError("child seeds are equal; pass force=True to allow identical children")
    if fork.fork_epoch > cfg.epochs:
        raise ConfigError(f"fork epoch {fork.fork_epoch} exceeds parent epochs {cfg.epochs}")
    if parent is None or fork.fork_epoch not in parent:
        parent = train_parent(net, data, cfg, fork.fork_epoch, init)
    start = parent[fork.fork_epoch]
    parent_ckpts = {e: p for e, p in parent.items() if e <= fork.fork_epoch}

    def child(seed):
        return train(net, start, data, child_config(cfg, fork, seed),
                     checkpoint_every=fork.checkpoint_every)

    with ThreadPoolExecutor(max_workers=min(2, thread_count())) as pool:
        c1, c2 = pool.map(child, fork.child_seeds)
    manifest = run_manifest(net, data, cfg, fork, {
        "final_grad_norms": {"child1": c1.final_grad_norm, "child2": c2.final_grad_norm},
        "final_losses": {"child1": c1.final_loss, "child2": c2.final_loss},
        "checkpoint_hashes": {
            "parent": {str(e): checkpoint_hash(p) for e, p in sorted(parent_ckpts.items())},
            "child1": {str(e): checkpoint_hash(p) for e, p in sorted(c1.items())},
            "child2": {str(e): checkpoint_hash(p) for e, p in sorted(c2.items())},
        },
    })
    return ForkedRun(parent_ckpts, dict(c1), dict(c2), cfg, fork, manifest)
