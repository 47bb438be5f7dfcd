"""Three-stage training schedule, one-shot adaptation, and checkpointing.

Stage 1 trains the general encoder and decoder (fusion bypassed) on local
correlation, adding the reference-distillation term during the final fifth
of the epochs. Stage 2 freezes the general encoder and trains the structural
encoder and decoder on SSIM. Stage 3 freezes both encoders and trains the
fusion layers and decoder on local correlation again. One-shot adaptation
reruns the stage-2 objective on a single pair, starting every time from a
pristine copy of the trained state.

Optimizer moments are reset at stage boundaries and at the start of every
one-shot run; frozen groups never receive gradients or updates.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass, asdict, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch

from . import tensorio
from .losses import LossConfig, stage_loss
from .model import NetworkConfig, RegistrationNetwork
from .validation import CheckpointError, ContractViolation
from .volgrid import DisplacementField, warp_tensor

CHECKPOINT_VERSION = 1

STAGE_MODES = {1: "g", 2: "s", 3: "fuse"}
STAGE_TRAINABLE = {
    1: ("encoder_g", "decoder"),
    2: ("encoder_s", "decoder"),
    3: ("fusion", "decoder"),
}
ONE_SHOT_TRAINABLE = ("encoder_s", "fusion", "decoder")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch: int = 1
    epochs: tuple = (30, 20, 10)
    mi_active_fraction: float = 0.2
    one_shot_iters: tuple = (5, 10, 20)
    seed: int = 0

    def __post_init__(self):
        self.epochs = tuple(int(e) for e in self.epochs)
        self.one_shot_iters = tuple(int(i) for i in self.one_shot_iters)
        if self.lr <= 0:
            raise ContractViolation("lr must be > 0")
        if self.batch != 1:
            raise ContractViolation("only batch size 1 is supported")
        if not 0 < self.mi_active_fraction <= 1:
            raise ContractViolation("mi_active_fraction must lie in (0, 1]")
        if len(self.epochs) != 3 or min(self.epochs) < 1:
            raise ContractViolation("epochs must be three positive counts")


@dataclass
class ModelState:
    """Trainable parameters plus the bookkeeping the schedule depends on."""

    network: RegistrationNetwork
    loss_cfg: LossConfig
    train_cfg: TrainConfig
    stage: int = 0  # last completed stage; 3 = fully trained
    epochs_done: int = 0

    @property
    def net_cfg(self) -> NetworkConfig:
        return self.network.cfg

    def config_dict(self) -> dict:
        return {
            "network": self.net_cfg.to_dict(),
            "loss": asdict(self.loss_cfg),
            "train": asdict(self.train_cfg),
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.config_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


def init_state(net_cfg: NetworkConfig = None, loss_cfg: LossConfig = None,
               train_cfg: TrainConfig = None) -> ModelState:
    return ModelState(
        RegistrationNetwork(net_cfg or NetworkConfig()),
        loss_cfg or LossConfig(),
        train_cfg or TrainConfig(),
    )


def mi_epochs_active(epoch: int, total_epochs: int, fraction: float) -> bool:
    """True iff the distillation term applies in this (0-indexed) epoch."""
    return epoch >= total_epochs - math.ceil(fraction * total_epochs)


def _set_trainable(network: RegistrationNetwork, groups: tuple):
    for name, params in network.parameter_groups().items():
        flag = name in groups and name != "reference"
        for p in params:
            p.requires_grad_(flag)


def _trainable_params(network: RegistrationNetwork, groups: tuple):
    out = []
    for name in groups:
        if name == "reference":
            continue
        out.extend(network.parameter_groups()[name])
    return out


def _pair_tensors(pair) -> Tuple[torch.Tensor, torch.Tensor]:
    moving = getattr(pair, "moving", pair[0] if isinstance(pair, (tuple, list)) else None)
    fixed = getattr(pair, "fixed", pair[1] if isinstance(pair, (tuple, list)) else None)
    if moving is None or fixed is None:
        raise ContractViolation("a pair must provide moving and fixed volumes")
    return moving, fixed


def _step_loss(state: ModelState, moving, fixed, stage: int, mi_active: bool) -> torch.Tensor:
    net = state.network
    mv = getattr(moving, "voxels", moving)
    fx = getattr(fixed, "voxels", fixed)
    fld, _, extras = net(mv, fx, STAGE_MODES[stage])
    warped = warp_tensor(mv, fld.u)
    mi_term = None
    if stage == 1 and mi_active:
        mi_term = 0.5 * (
            net.distillation_term(mv, extras["g1_moving"], state.loss_cfg)
            + net.distillation_term(fx, extras["g1_fixed"], state.loss_cfg)
        )
    return stage_loss(stage, fx, warped, fld.u, mi_term, state.loss_cfg)


def train_stage(stage: int, pairs, state: ModelState, log: Optional[List] = None) -> ModelState:
    """Run one stage's full epoch schedule over the pair stream.

    Pairs are visited in a seeded permutation each epoch, one pair per
    optimizer step. ``log`` (when given) collects one
    (stage, epoch, pair_index, loss) row per step. The state is advanced in
    place and returned.
    """
    if stage not in (1, 2, 3):
        raise ContractViolation(f"stage must be 1, 2, or 3, got {stage}")
    if state.stage != stage - 1:
        raise ContractViolation(
            f"stage {stage} requires a state that completed stage {stage - 1}, "
            f"found stage {state.stage}"
        )
    if not pairs:
        raise ContractViolation("the pair stream is empty")
    cfg = state.train_cfg
    net = state.network
    _set_trainable(net, STAGE_TRAINABLE[stage])
    optimizer = torch.optim.Adam(_trainable_params(net, STAGE_TRAINABLE[stage]), lr=cfg.lr)
    total_epochs = cfg.epochs[stage - 1]
    for epoch in range(total_epochs):
        order = np.random.default_rng((cfg.seed, stage, epoch)).permutation(len(pairs))
        mi_active = stage == 1 and mi_epochs_active(epoch, total_epochs, cfg.mi_active_fraction)
        for idx in order:
            moving, fixed = _pair_tensors(pairs[idx])
            loss = _step_loss(state, moving, fixed, stage, mi_active)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            if log is not None:
                log.append((stage, epoch, int(idx), float(loss.detach())))
        state.epochs_done += 1
    state.stage = stage
    return state


def infer(state: ModelState, moving, fixed, mode: Optional[str] = None) -> DisplacementField:
    """Plain registration with the current parameters (no adaptation)."""
    if mode is None:
        mode = STAGE_MODES.get(max(state.stage, 1), "fuse") if state.stage < 3 else "fuse"
    net = state.network
    was_training = net.training
    net.eval()
    with torch.no_grad():
        fld, _, _ = net(getattr(moving, "voxels", moving), getattr(fixed, "voxels", fixed), mode)
    if was_training:
        net.train()
    return fld


@dataclass
class AdaptResult:
    state: ModelState
    field: DisplacementField
    objective: List[float]  # stage-2 objective before each step, plus final
    fields: Dict[int, DisplacementField] = field(default_factory=dict)
    seconds: float = 0.0


def one_shot_adapt(pair, state: ModelState, iters: int,
                   record_fields_at: tuple = ()) -> AdaptResult:
    """Fine-tune a pristine copy of the trained state on one pair.

    Runs ``iters`` gradient steps of the stage-2 objective with the general
    encoder frozen; the passed-in base state is never touched. The objective
    trace has ``iters + 1`` entries (value before each step, then the final
    value). ``record_fields_at`` requests inference snapshots at those
    iteration counts; because a single pair makes the optimization path
    deterministic, a snapshot at k equals a separate k-iteration run.
    """
    if state.stage != 3:
        raise ContractViolation("one-shot adaptation needs a fully trained (stage 3) state")
    allowed = set(state.train_cfg.one_shot_iters) | {0}
    if iters not in allowed:
        raise ContractViolation(f"iters must be one of {sorted(allowed)}, got {iters}")
    adapted = ModelState(
        copy.deepcopy(state.network),
        state.loss_cfg,
        state.train_cfg,
        stage=state.stage,
        epochs_done=state.epochs_done,
    )
    net = adapted.network
    _set_trainable(net, ONE_SHOT_TRAINABLE)
    optimizer = torch.optim.Adam(_trainable_params(net, ONE_SHOT_TRAINABLE), lr=state.train_cfg.lr)
    moving, fixed = _pair_tensors(pair)
    fields: Dict[int, DisplacementField] = {}
    trace = []
    wanted = set(record_fields_at)

    def snapshot(k):
        if k in wanted:
            fields[k] = infer(adapted, moving, fixed, "fuse")

    snapshot(0)
    for t in range(iters):
        loss = _adapt_objective(adapted, moving, fixed, grad=True)
        trace.append(float(loss.detach()))
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        snapshot(t + 1)
    with torch.no_grad():
        trace.append(float(_adapt_objective(adapted, moving, fixed, grad=False)))
    final_field = infer(adapted, moving, fixed, "fuse")
    return AdaptResult(adapted, final_field, trace, fields)


def _adapt_objective(state: ModelState, moving, fixed, grad: bool) -> torch.Tensor:
    """Stage-2 objective computed on the full (fused) network."""
    net = state.network
    mv = getattr(moving, "voxels", moving)
    fx = getattr(fixed, "voxels", fixed)
    ctx = torch.enable_grad() if grad else torch.no_grad()
    with ctx:
        fld, _, _ = net(mv, fx, "fuse")
        warped = warp_tensor(mv, fld.u)
        return stage_loss(2, fx, warped, fld.u, None, state.loss_cfg)


def save_checkpoint(state: ModelState, path) -> str:
    tensors = {name: t for name, t in state.network.state_dict().items()}
    meta = {
        "kind": "checkpoint",
        "checkpoint_version": CHECKPOINT_VERSION,
        "config": state.config_dict(),
        "config_hash": state.config_hash(),
        "stage": state.stage,
        "epochs_done": state.epochs_done,
    }
    tensorio.write_named_tensors(path, tensors, meta)
    return str(path)


def load_checkpoint(path) -> ModelState:
    tensors, meta = tensorio.read_named_tensors(path)
    if meta.get("kind") != "checkpoint":
        raise CheckpointError(f"{path}: not a checkpoint file")
    if meta.get("checkpoint_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {meta.get('checkpoint_version')}")
    cfg = meta.get("config", {})
    state = ModelState(
        RegistrationNetwork(NetworkConfig.from_dict(cfg["network"])),
        LossConfig(**cfg["loss"]),
        TrainConfig(**cfg["train"]),
        stage=int(meta.get("stage", 0)),
        epochs_done=int(meta.get("epochs_done", 0)),
    )
    if meta.get("config_hash") != state.config_hash():
        raise CheckpointError(f"{path}: config hash mismatch")
    own = state.network.state_dict()
    if set(own) != set(tensors):
        raise CheckpointError(f"{path}: parameter names do not match the configured network")
    for name, t in tensors.items():
        if tuple(t.shape) != tuple(own[name].shape):
            raise CheckpointError(f"{path}: shape mismatch for {name}")
    state.network.load_state_dict(tensors)
    return state


def file_hash(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
