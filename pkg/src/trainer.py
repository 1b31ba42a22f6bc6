"""Shared training harness: seeding, optimizer and schedule, history, checkpoints."""

import hashlib
import random
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import torch
from torch import nn

from formats.checkpoint import Checkpoint, read_checkpoint, write_checkpoint
from validator import MissingPrerequisiteError, NonFiniteLossError, check_loss_finite

CHECKPOINT_DIR = "checkpoints"


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def make_optimizer(params, cfg) -> torch.optim.AdamW:
    """AdamW from a config carrying lr, beta1, beta2, weight_decay."""
    return torch.optim.AdamW(
        params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay
    )


def make_scheduler(opt, cfg, steps: int | None = None) -> torch.optim.lr_scheduler.CosineAnnealingLR:
    """Cosine annealing from cfg.lr to cfg.lr_min over `steps` (default cfg.steps)."""
    total = cfg.steps if steps is None else steps
    return torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(total, 1), eta_min=cfg.lr_min)


def freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    return module.eval()


def module_hash(module: nn.Module) -> str:
    """SHA-256 over the state dict, in key order."""
    h = hashlib.sha256()
    for name, value in module.state_dict().items():
        h.update(name.encode("utf-8"))
        h.update(value.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def module_arrays(modules: dict[str, nn.Module]) -> dict[str, np.ndarray]:
    arrays = {}
    for prefix, module in modules.items():
        for name, value in module.state_dict().items():
            arrays[f"{prefix}.{name}"] = value.detach().cpu().numpy().copy()
    return arrays


def load_module_arrays(module: nn.Module, tensors: dict[str, np.ndarray], prefix: str) -> nn.Module:
    head = prefix + "."
    state = {k[len(head):]: torch.from_numpy(v.copy()) for k, v in tensors.items() if k.startswith(head)}
    if not state:
        raise MissingPrerequisiteError(f"Checkpoint has no tensors for '{prefix}'")
    module.load_state_dict(state)
    return module


def checkpoint_dir(run_dir: Path, step: int) -> Path:
    return Path(run_dir) / CHECKPOINT_DIR / f"step_{step:06d}"


def save_checkpoint(directory: Path, kind: str, step: int, seed: int,
                    modules: dict[str, nn.Module] | None = None,
                    meta: dict[str, str] | None = None,
                    config: dict[str, str] | None = None,
                    arrays: dict[str, np.ndarray] | None = None) -> Path:
    """Write modules (or a snapshot taken earlier with module_arrays) as a checkpoint."""
    ckpt = Checkpoint(
        kind=kind, step=step, seed=seed,
        tensors=arrays if arrays is not None else module_arrays(modules or {}),
        meta=dict(meta or {}), config=dict(config or {}),
    )
    return write_checkpoint(ckpt, directory)


def resolve_checkpoint(path: Path) -> Path:
    """A checkpoint directory, or a run directory whose latest step checkpoint is used."""
    path = Path(path)
    if (path / "manifest.txt").exists():
        return path
    steps = sorted((path / CHECKPOINT_DIR).glob("step_*"))
    steps = [p for p in steps if (p / "manifest.txt").exists()]
    if not steps:
        raise MissingPrerequisiteError(f"No checkpoint found at {path}")
    return steps[-1]


def load_checkpoint(path: Path, kind: str) -> Checkpoint:
    directory = resolve_checkpoint(path)
    ckpt = read_checkpoint(directory)
    if ckpt.kind != kind:
        raise MissingPrerequisiteError(
            f"Checkpoint {directory} holds a '{ckpt.kind}' model, expected '{kind}'"
        )
    print(f"  Loaded {kind} checkpoint: {directory} (step {ckpt.step})")
    return ckpt


@dataclass
class History:
    """Per-step loss rows, written as CSV with a fixed column order."""
    columns: list[str]
    rows: list[dict] = field(default_factory=list)

    def append(self, step: int, values: dict[str, float], lr: float) -> None:
        row = {"step": step}
        row.update({c: float(values[c]) for c in self.columns})
        row["lr"] = lr
        self.rows.append(row)

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=["step", *self.columns, "lr"])

    def write(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.frame().to_csv(path, index=False)
        return path

    def moving_average(self, column: str, end_step: int, window: int = 10) -> float:
        """Mean of `column` over the `window` rows ending at end_step (inclusive)."""
        values = [r[column] for r in self.rows if r["step"] <= end_step][-window:]
        return float(np.mean(values)) if values else float("nan")


def guard_finite(components: dict[str, float], dump) -> None:
    """Raise NonFiniteLossError after writing a last-good checkpoint via `dump()`."""
    try:
        check_loss_finite(components)
    except NonFiniteLossError as e:
        path = dump()
        print(f"  Warning: non-finite '{e.component}'; dumped last-good checkpoint to {path}")
        raise NonFiniteLossError(e.component, e.value, path)


def cycle(loader):
    """Endless iteration over a DataLoader, one reshuffled epoch after another."""
    while True:
        yield from loader
