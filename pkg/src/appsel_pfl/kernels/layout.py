"""Flat parameter layout shared by the model and both kernel backends."""
from __future__ import annotations

TOP_LAYER = ("score.weight", "score.bias", "epistemic.weight", "epistemic.bias")


def param_shapes(n_features: int, d_model: int, n_heads: int) -> list[tuple[str, tuple[int, ...]]]:
    if d_model % n_heads:
        raise ValueError(f"d_model={d_model} is not divisible by n_heads={n_heads}")
    dh = d_model // n_heads
    shapes = [("input.weight", (n_features, d_model)), ("input.bias", (d_model,))]
    for h in range(n_heads):
        for role in ("query", "key", "value"):
            shapes.append((f"attn.head{h}.{role}", (d_model, dh)))
    shapes += [
        ("attn.out.weight", (d_model, d_model)),
        ("attn.out.bias", (d_model,)),
        ("score.weight", (d_model,)),
        ("score.bias", (1,)),
        ("epistemic.weight", (d_model,)),
        ("epistemic.bias", (1,)),
    ]
    return shapes


def param_count(n_features: int, d_model: int, n_heads: int) -> int:
    total = 0
    for _, shape in param_shapes(n_features, d_model, n_heads):
        size = 1
        for s in shape:
            size *= s
        total += size
    return total
