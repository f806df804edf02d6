"""Training phases, the single training step, and resumable run state."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from ..autodiff import Adam, AdamConfig, NonFiniteError, Tensor, backward, checked
from ..autodiff import checkpoint as dckp
from ..fgm import masked_mse, scene_mask
from ..ors import SamplingPlan
from ..scene.raster import rasterize_reference
from ..scene.types import Scene
from .model import DualBranchModel, ItemCondition, ModelSpec
from .schedule import NoiseSchedule, q_sample

PHASES = ("base_pretrain", "branch_train", "joint")


@dataclass
class TrainConfig:
    phase: str = "base_pretrain"
    lr: float = 8e-5
    batch_size: int = 4
    steps: int = 100
    p_drop: float = 0.1
    use_fgm: bool = True
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.phase not in PHASES:
            raise ValueError(f"unknown phase {self.phase!r}; expected one of {PHASES}")
        if not 0 <= self.p_drop < 1:
            raise ValueError("p_drop must lie in [0, 1)")
        if self.lr <= 0 or self.batch_size < 1 or self.steps < 0 or self.checkpoint_every < 0:
            raise ValueError("lr must be positive, batch_size >= 1, steps and checkpoint_every >= 0")

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise KeyError(f"unknown train keys {unknown}")
        return cls(**doc)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Example:
    image: np.ndarray  # (3, V, U) in [-1, 1]
    mask: np.ndarray  # (V, U)
    condition: ItemCondition


def make_example(scene: Scene, cam_index: int, plan: SamplingPlan) -> Example:
    img = rasterize_reference(scene, cam_index) * 2.0 - 1.0
    return Example(
        np.ascontiguousarray(img.transpose(2, 0, 1)),
        scene_mask(scene, cam_index),
        ItemCondition.from_scene(scene, cam_index, plan),
    )


def build_examples(scenes: Sequence[Scene], plan: SamplingPlan) -> List[Example]:
    return [make_example(s, c, plan) for s in scenes for c in range(len(s.cameras))]


def set_phase(model: DualBranchModel, phase: str) -> None:
    """Apply the phase's trainability; the text table is frozen in every phase."""
    if phase not in PHASES:
        raise ValueError(f"unknown phase {phase!r}")
    base = phase in ("base_pretrain", "joint")
    cond = phase in ("branch_train", "joint")
    for p in model.base_parameters():
        p.trainable = base
    for p in model.condition_parameters():
        p.trainable = cond
    model.conditions.text_table.trainable = False


def trainable(model: DualBranchModel) -> List:
    return [p for p in model.parameters() if p.trainable]


@dataclass
class StepResult:
    loss: float
    applied: bool


def train_step(
    model: DualBranchModel,
    optimizer: Adam,
    schedule: NoiseSchedule,
    batch: Sequence[Example],
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> StepResult:
    """One noise-prediction step; a non-finite loss or gradient leaves every parameter untouched."""
    B = len(batch)
    z0 = np.stack([ex.image for ex in batch])
    t = rng.integers(1, schedule.T + 1, size=B)
    eps = rng.standard_normal(z0.shape)
    zt = Tensor(q_sample(z0, t, eps, schedule))
    if cfg.phase == "base_pretrain":
        pred = model.base_eps(zt, t)
    else:
        drop = rng.random(B) < cfg.p_drop
        size = batch[0].condition.ors_background.shape
        items = [ItemCondition.null((size[1], size[0]), size[2]) if d else ex.condition for d, ex in zip(drop, batch)]
        pred = model.eps(zt, t, items)
    mask = np.stack([ex.mask for ex in batch]) if cfg.use_fgm else np.ones((B,) + z0.shape[2:])
    loss = masked_mse(eps, pred, mask)
    value = loss.item()
    if not np.isfinite(value):
        return StepResult(value, False)
    model.zero_grad()
    backward(loss)
    try:
        with checked():
            optimizer.step()
    except NonFiniteError:
        return StepResult(value, False)
    return StepResult(value, True)


# ----------------------------------------------------------------------------
# run state on disk


@dataclass
class RunState:
    step: int
    phase: str
    config_hash: str
    model: dict
    rng_state: dict
    optimizer_steps: int
    branches_initialized: bool

    def to_dict(self) -> dict:
        return asdict(self)


def sidecar_path(path) -> Path:
    return Path(str(path) + ".json")


def save_checkpoint(path, model: DualBranchModel, optimizer: Optional[Adam], state: RunState) -> None:
    """DCKP weights plus optimizer moments, and a JSON sidecar; both written atomically."""
    path = Path(path)
    records: Dict[str, np.ndarray] = dict(model.state_dict())
    if optimizer is not None:
        records.update(optimizer.state_dict())
    tmp = path.with_name(path.name + ".tmp")
    dckp.save(tmp, records)
    os.replace(tmp, path)
    side = sidecar_path(path)
    tmp = side.with_name(side.name + ".tmp")
    tmp.write_text(json.dumps(state.to_dict(), sort_keys=True, indent=1) + "\n")
    os.replace(tmp, side)


def load_checkpoint(path):
    """(records, RunState)."""
    path = Path(path)
    records = dckp.load(path)
    doc = json.loads(sidecar_path(path).read_text())
    return records, RunState(**doc)


def model_records(records: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    return {k: v for k, v in records.items() if not k.startswith("adam.")}


def build_model(spec: ModelSpec, seed: int) -> DualBranchModel:
    return DualBranchModel(np.random.default_rng(seed), spec)


def parameter_digest(params) -> str:
    import hashlib

    h = hashlib.sha256()
    for p in params:
        h.update(p.name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


class Trainer:
    """Runs one phase for ``cfg.steps`` steps, logging and checkpointing along the way."""

    def __init__(
        self,
        model: DualBranchModel,
        examples: Sequence[Example],
        cfg: TrainConfig,
        config_hash: str = "",
        schedule: Optional[NoiseSchedule] = None,
    ):
        if not examples:
            raise ValueError("training needs at least one example")
        self.model = model
        self.examples = list(examples)
        self.cfg = cfg
        self.config_hash = config_hash
        self.schedule = schedule or NoiseSchedule(model.spec.T)
        self.rng = np.random.default_rng(cfg.seed)
        self.step = 0
        self.branches_initialized = cfg.phase == "base_pretrain"
        set_phase(model, cfg.phase)
        self.optimizer = Adam(trainable(model), AdamConfig(lr=cfg.lr))

    def start_phase(self, prior: Optional[RunState]) -> None:
        """Warm-start the branches when the conditional phase begins on a pretrained base."""
        done = prior.branches_initialized if prior is not None and prior.phase != "base_pretrain" else False
        if self.cfg.phase != "base_pretrain" and not done:
            self.model.init_branches_from_base()
        self.branches_initialized = self.cfg.phase != "base_pretrain" or (prior is not None and prior.branches_initialized)

    def state(self) -> RunState:
        return RunState(
            step=self.step,
            phase=self.cfg.phase,
            config_hash=self.config_hash,
            model=self.model.spec.to_dict(),
            rng_state=self.rng.bit_generator.state,
            optimizer_steps=self.optimizer.step_count,
            branches_initialized=self.branches_initialized,
        )

    def restore(self, records: Dict[str, np.ndarray], state: RunState) -> None:
        """Resume mid-phase: weights, optimizer moments, RNG stream and step counter."""
        self.model.load_state_dict(model_records(records))
        self.optimizer.load_state_dict(records, state.optimizer_steps)
        self.rng.bit_generator.state = state.rng_state
        self.step = state.step
        self.branches_initialized = state.branches_initialized

    def save(self, path) -> None:
        save_checkpoint(path, self.model, self.optimizer, self.state())

    def run(
        self,
        log_path=None,
        checkpoint_path=None,
        on_step: Optional[Callable[[int, float], None]] = None,
    ) -> List[float]:
        losses = []
        cfg = self.cfg
        log = open(log_path, "a") if log_path is not None else None
        try:
            while self.step < cfg.steps:
                idx = self.rng.choice(len(self.examples), size=min(cfg.batch_size, len(self.examples)), replace=False)
                result = train_step(self.model, self.optimizer, self.schedule, [self.examples[i] for i in idx], cfg, self.rng)
                self.step += 1
                losses.append(result.loss)
                if log is not None:
                    log.write(f"{self.step} {result.loss:.6f} {cfg.lr:g} {cfg.phase}\n")
                    log.flush()
                if on_step is not None:
                    on_step(self.step, result.loss)
                if checkpoint_path is not None and cfg.checkpoint_every and self.step % cfg.checkpoint_every == 0:
                    self.save(checkpoint_path)
        finally:
            if log is not None:
                log.close()
        if checkpoint_path is not None:
            self.save(checkpoint_path)
        return losses


def read_metrics(path) -> List[tuple]:
    """Records (step, loss, lr, phase) from a metrics log."""
    out = []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if len(parts) == 4:
            out.append((int(parts[0]), float(parts[1]), float(parts[2]), parts[3]))
    return out


def truncate_metrics(path, phase: str, step: int) -> None:
    """Drop records of ``phase`` past ``step`` so a resumed run continues the log seamlessly."""
    path = Path(path)
    if not path.exists():
        return
    keep = [
        line for line in path.read_text().splitlines()
        if not (len(line.split()) == 4 and line.split()[3] == phase and int(line.split()[0]) > step)
    ]
    path.write_text("".join(line + "\n" for line in keep))


def smoothed(values: Sequence[float], window: int = 100) -> np.ndarray:
    """Trailing moving average (shorter windows at the start)."""
    v = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)
