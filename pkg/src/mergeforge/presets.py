"""Named architecture schemas and reference layouts."""

from __future__ import annotations

import numpy as np

from .checkpoint import ArchitectureSchema, ModelParams


def sam_vit_b_schema() -> ArchitectureSchema:
    """SAM ViT-B: 12 encoder blocks, 4 prompt layers, 2 decoder transformer + 3 conv layers."""
    membership = {
        "image_encoder.patch_embed": ("extra", 0),
        "image_encoder.pos_embed": ("extra", 1),
        "image_encoder.neck": ("extra", 2),
    }
    for i in range(12):
        membership[f"image_encoder.blocks.{i}"] = ("encoder", i)
    for i in range(4):
        membership[f"prompt_encoder.layers.{i}"] = ("prompt", i)
    for i in range(2):
        membership[f"mask_decoder.transformer.layers.{i}"] = ("decoder", i)
    for j in range(3):
        membership[f"mask_decoder.upscaling.{j}"] = ("decoder", 2 + j)
    return ArchitectureSchema(12, 4, 2, 3, ("patch_embed", "pos_embed", "neck"), membership)


def small_schema(
    encoder_layers: int = 4,
    prompt_layers: int = 2,
    decoder_transformer_layers: int = 1,
    decoder_conv_layers: int = 1,
    extra_groups: tuple[str, ...] = (),
) -> ArchitectureSchema:
    """A generic schema with one name prefix per layer (``encoder.<i>``, ``prompt.<i>``, ...)."""
    membership = {}
    for i in range(encoder_layers):
        membership[f"encoder.{i}"] = ("encoder", i)
    for i in range(prompt_layers):
        membership[f"prompt.{i}"] = ("prompt", i)
    for i in range(decoder_transformer_layers + decoder_conv_layers):
        membership[f"decoder.{i}"] = ("decoder", i)
    for i, name in enumerate(extra_groups):
        membership[name] = ("extra", i)
    return ArchitectureSchema(
        encoder_layers, prompt_layers, decoder_transformer_layers, decoder_conv_layers,
        tuple(extra_groups), membership,
    )


PRESETS = {"sam-vit-b": sam_vit_b_schema}


def get_schema(name: str) -> ArchitectureSchema:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ValueError(f"unknown schema preset {name!r}; known: {sorted(PRESETS)}") from None


def sam_vit_b_layout(hidden: int = 768, prompt_dim: int = 256) -> dict[str, tuple[int, ...]]:
    """Tensor names and shapes for a lightweight SAM ViT-B stand-in.

    Only vector-shaped tensors (norms, biases, small embeddings) at the real
    widths are included so dummies stay a few MB.
    """
    shapes: dict[str, tuple[int, ...]] = {
        "image_encoder.patch_embed.proj.bias": (hidden,),
        "image_encoder.pos_embed": (1, 4, 4, hidden),
        "image_encoder.neck.0.weight": (prompt_dim, hidden),
        "image_encoder.neck.1.weight": (prompt_dim,),
        "image_encoder.neck.1.bias": (prompt_dim,),
    }
    for i in range(12):
        p = f"image_encoder.blocks.{i}"
        shapes[f"{p}.norm1.weight"] = (hidden,)
        shapes[f"{p}.norm1.bias"] = (hidden,)
        shapes[f"{p}.attn.qkv.bias"] = (3 * hidden,)
        shapes[f"{p}.attn.proj.bias"] = (hidden,)
        shapes[f"{p}.mlp.lin2.bias"] = (hidden,)
    for i in range(4):
        shapes[f"prompt_encoder.layers.{i}.weight"] = (prompt_dim // 4, 4)
        shapes[f"prompt_encoder.layers.{i}.bias"] = (prompt_dim // 4,)
    for i in range(2):
        p = f"mask_decoder.transformer.layers.{i}"
        shapes[f"{p}.self_attn.out_proj.bias"] = (prompt_dim,)
        shapes[f"{p}.norm1.weight"] = (prompt_dim,)
        shapes[f"{p}.mlp.lin1.bias"] = (2048,)
    for j, ch in enumerate((64, 64, 32)):
        shapes[f"mask_decoder.upscaling.{j}.weight"] = (ch, 4)
        shapes[f"mask_decoder.upscaling.{j}.bias"] = (ch,)
    return shapes


def random_checkpoint(
    shapes: dict[str, tuple[int, ...]],
    rng: np.random.Generator,
    scale: float = 1.0,
    meta: dict[str, str] | None = None,
) -> ModelParams:
    arrays = {name: rng.normal(0.0, scale, size=shape) for name, shape in sorted(shapes.items())}
    return ModelParams.from_arrays(arrays, meta)


def reference_sam_merge_config():
    """The published 18-group SAM / MedicoSAM / MedSAM merge layout.

    Pool order is (SAM base, MedicoSAM, MedSAM). Granularity is (2, 1, 1).
    Two-valued SLERP rows are mapped to the pair of listed models with
    ``t = w_b / (w_a + w_b)``. The table lists six decoder rows while the
    schema has five decoder layers, so the last decoder row is not used.
    """
    from .config_space import GroupMergeSpec, MergeConfig

    def ta(scaling):
        return GroupMergeSpec("task_arithmetic", scaling=scaling)

    def ties(retain, scaling):
        return GroupMergeSpec("ties", scaling=scaling, retain=retain)

    def slerp(a, b, wa, wb):
        return GroupMergeSpec("slerp", pair=(a, b), t=wb / (wa + wb))

    def linear(*w):
        return GroupMergeSpec("linear", weights=tuple(w))

    encoder = [ties(0.59, 0.07), ta(0.30), linear(0.60, 0.59, 0.12), ta(0.06), slerp(0, 2, 0.93, 0.90), ta(0.06)]
    prompt = [slerp(0, 2, 0.95, 0.75), ta(0.23), slerp(0, 2, 0.77, 0.67), linear(0.95, 0.54, 0.57)]
    decoder = [
        linear(0.44, 0.30, 0.01),
        linear(0.40, 0.50, 0.50),
        linear(0.50, 0.50, 0.50),
        slerp(0, 1, 0.50, 0.50),
        ties(0.18, 0.55),
    ]
    extras = [ties(0.50, 0.50), slerp(1, 2, 0.59, 0.55), ties(0.50, 0.50)]  # patch_embed, pos_embed, neck
    return MergeConfig(2, 1, 1, tuple(encoder + prompt + decoder + extras))
