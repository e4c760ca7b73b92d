"""
ES → DQN Warm Start
Load an ES-trained policy into a fresh DQN online network and sync the target.
"""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Union

from app.models import MlpSpec, TransferMode
from app.modules.dqn_trainer import sync_target
from app.modules.nn_core import MlpPolicy, flatten, init_policy, layer_slices, load_checkpoint, save_checkpoint, unflatten

logger = logging.getLogger(__name__)


class TransferError(ValueError):
    """Raised when the ES and DQN architectures cannot share weights; names the first mismatching layer."""
    pass


def _check_compatible(es_spec: MlpSpec, dqn_spec: MlpSpec, mode: TransferMode) -> None:
    if es_spec.activation != dqn_spec.activation:
        raise TransferError(
            f"activation mismatch: ES uses {es_spec.activation.value}, DQN uses {dqn_spec.activation.value}"
        )
    es_layers, dqn_layers = es_spec.layer_dims, dqn_spec.layer_dims
    n_hidden = max(len(es_layers), len(dqn_layers)) - 1
    for k in range(n_hidden):
        es_dims = es_layers[k] if k < len(es_layers) - 1 else None
        dqn_dims = dqn_layers[k] if k < len(dqn_layers) - 1 else None
        if es_dims != dqn_dims:
            raise TransferError(f"hidden layer {k}: ES {es_dims} (fan_in, fan_out) vs DQN {dqn_dims}")
    if es_spec.input_dim != dqn_spec.input_dim:
        raise TransferError(f"layer 0: input_dim {es_spec.input_dim} vs {dqn_spec.input_dim}")
    if mode == TransferMode.FULL and es_spec.output_dim != dqn_spec.output_dim:
        raise TransferError(
            f"output layer {len(dqn_layers) - 1}: output_dim {es_spec.output_dim} vs {dqn_spec.output_dim}"
        )


def warm_start_dqn(
    es_policy: MlpPolicy,
    dqn_spec: MlpSpec,
    mode: TransferMode = TransferMode.HIDDEN_ONLY,
    seed: int = 0,
) -> tuple[MlpPolicy, MlpPolicy]:
    """
    Returns (online, target). FULL copies every layer; HIDDEN_ONLY copies the
    hidden layers and takes the output layer from init_policy(dqn_spec, seed).
    ES scores are reused as Q-values without rescaling.
    """
    _check_compatible(es_policy.spec, dqn_spec, mode)
    es_theta = flatten(es_policy)
    if mode == TransferMode.FULL:
        online = unflatten(dqn_spec, es_theta)
    else:
        theta = flatten(init_policy(dqn_spec, seed))
        hidden_end = layer_slices(dqn_spec)[-1].start
        theta[:hidden_end] = es_theta[:hidden_end]
        online = unflatten(dqn_spec, theta)
    logger.info(
        "Warm start (%s): copied %d of %d parameters",
        mode.value,
        dqn_spec.param_count if mode == TransferMode.FULL else layer_slices(dqn_spec)[-1].start,
        dqn_spec.param_count,
    )
    return online, sync_target(online)


def transfer_checkpoint(
    es_checkpoint: Union[str, Path],
    out_dir: Union[str, Path],
    mode: TransferMode = TransferMode.HIDDEN_ONLY,
    output_dim: int | None = None,
    seed: int = 0,
) -> tuple[Path, Path]:
    """Read an ES checkpoint and write the DQN-ready online.evsd / target.evsd pair."""
    es_policy = load_checkpoint(es_checkpoint)
    es_spec = es_policy.spec
    dqn_spec = es_spec if output_dim is None else es_spec.model_copy(update={"output_dim": output_dim})
    online, target = warm_start_dqn(es_policy, dqn_spec, mode, seed)
    out = Path(out_dir)
    return save_checkpoint(online, out / "online.evsd"), save_checkpoint(target, out / "target.evsd")

