"""Python bindings for the robustit training and defense core."""

from ._core import (
    NonFiniteLoss,
    Optimizer,
    attack_names,
    attack_success_rate,
    batch_importance,
    build_mask,
    color_jitter,
    corpus_bleu,
    generate_clean_task,
    hflip,
    imc_loss,
    mode_names,
    run_cli,
    scheduled_lr,
    update_importance,
)

__all__ = [
    "NonFiniteLoss",
    "Optimizer",
    "attack_names",
    "attack_success_rate",
    "batch_importance",
    "build_mask",
    "color_jitter",
    "corpus_bleu",
    "generate_clean_task",
    "hflip",
    "imc_loss",
    "mode_names",
    "run_cli",
    "scheduled_lr",
    "update_importance",
]
