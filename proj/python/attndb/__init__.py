"""Staged personalization trainer for latent diffusion (toy-scale core).

Thin wrapper over the compiled ``attndb._core`` extension: a three-stage
training schedule (embedding alignment, cross-attention refinement, full
denoiser), a cross-attention map regularizer, and an evaluation harness,
all runnable on a seeded CPU toy backend.
"""

from attndb._core import (
    ToyBackend,
    ToyConfig,
    __version__,
    add_noise,
    aggregate_heatmap,
    attention_reg_loss,
    baseline_plan,
    default_schedule,
    diffusion_loss,
    load_prompt_suite,
    pooled_stats,
    render_prompt,
    sha256_hex,
    suite_hash,
    toy_identity_score,
    toy_text_alignment_score,
    train_run,
    write_png,
)

__all__ = [
    "ToyBackend",
    "ToyConfig",
    "__version__",
    "add_noise",
    "aggregate_heatmap",
    "attention_reg_loss",
    "baseline_plan",
    "default_schedule",
    "diffusion_loss",
    "load_prompt_suite",
    "pooled_stats",
    "render_prompt",
    "sha256_hex",
    "suite_hash",
    "toy_identity_score",
    "toy_text_alignment_score",
    "train_run",
    "write_png",
]
