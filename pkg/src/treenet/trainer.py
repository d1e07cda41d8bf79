"""Shared seeded training loop used by all three training phases."""

from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np
import torch

from .errors import TrainingDivergedError


@dataclass
class TrainConfig:
    """Optimizer and schedule settings for one training phase."""

    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 8
    epochs: int = 100
    seed: int = 42

    def to_dict(self) -> dict:
        return {"lr": self.lr, "weight_decay": self.weight_decay,
                "batch_size": self.batch_size, "epochs": self.epochs, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def batch_index_stream(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled index batches covering all n samples once."""
    perm = rng.permutation(n)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


def training_loop(
    model: torch.nn.Module,
    make_batches: Callable[[int, np.random.Generator], Iterable],
    compute_loss: Callable[[torch.nn.Module, object], tuple[torch.Tensor, dict]],
    cfg: TrainConfig,
    eval_loss: Callable[[torch.nn.Module], float] | None = None,
) -> list[dict]:
    """Run AdamW over seeded epochs; keep the best-validation weights.

    `make_batches(epoch, rng)` yields the epoch's batches, `compute_loss`
    returns a scalar loss tensor plus extra log fields, and `eval_loss`
    (when given) scores the model once per epoch; the state with the lowest
    evaluation loss (training loss otherwise) is restored at the end.
    Aborts with the epoch index if the loss goes non-finite.
    """
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.lr,
                                  weight_decay=cfg.weight_decay)
    log: list[dict] = []
    best_loss = math.inf
    best_state = None
    for epoch in range(cfg.epochs):
        model.train()
        losses: list[float] = []
        part_sums: dict[str, float] = {}
        for batch in make_batches(epoch, rng):
            optimizer.zero_grad()
            loss, parts = compute_loss(model, batch)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(epoch)
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
            for k, v in parts.items():
                part_sums[k] = part_sums.get(k, 0.0) + float(v)
        entry = {"epoch": epoch, "train_loss": float(np.mean(losses))}
        for k, v in part_sums.items():
            entry[k] = v / len(losses)
        if eval_loss is not None:
            model.eval()
            entry["val_loss"] = float(eval_loss(model))
        log.append(entry)
        selector = entry.get("val_loss", entry["train_loss"])
        if selector < best_loss:
            best_loss = selector
            best_state = copy.deepcopy(model.state_dict())
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return log


def trailing_window_improved(log: list[dict], key: str = "train_loss",
                             window: int | None = None) -> bool:
    """True when the mean loss over the last window did not regress."""
    if len(log) < 2:
        return True
    if window is None:
        window = max(1, len(log) // 5)
    window = min(window, len(log) // 2) or 1
    tail = [e[key] for e in log[-window:]]
    prev = [e[key] for e in log[-2 * window : -window]]
    return float(np.mean(tail)) <= float(np.mean(prev)) + 1e-12


def weights_hash(model: torch.nn.Module) -> str:
    """Stable digest of all parameters and buffers, independent of pickling."""
    digest = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        digest.update(name.encode())
        digest.update(str(tuple(tensor.shape)).encode())
        digest.update(str(tensor.dtype).encode())
        digest.update(tensor.detach().cpu().numpy().tobytes())
    return digest.hexdigest()
