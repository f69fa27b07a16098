"""Patch attention on a hand-built scene.

Two identical textured tiles sit on a flat background.  With one of them hidden,
the query tile inside the hole should attend to its twin, and the wavelet
aggregation should copy the twin's detail bands into the hole.

    python3 demos/attention_tour.py
"""
import torch

from wain.attention import cosine_relation
from wain.generator import heatmap_grid, key_validity
from wain.haar import build_pyramid
from wain.wpa import AggregatedPyramid, wavelet_loss, wpa_aggregate

size, patch = 64, 8
g = torch.Generator().manual_seed(0)
texture = torch.rand(3, patch, patch, generator=g, dtype=torch.float64)
img = torch.full((1, 3, size, size), 0.5, dtype=torch.float64)
img[0, :, 8:16, 8:16] = texture        # tile (1, 1)
img[0, :, 40:48, 48:56] = texture      # tile (5, 6), hidden below

mask = torch.zeros(1, 1, size, size, dtype=torch.float64)
mask[..., 40:48, 48:56] = 1
valid = key_validity(mask, size // patch, size // patch)
print(f"valid key tiles: {int(valid.sum())} of {valid.numel()}")

# the clean image stands in for the features a trained encoder would predict
rel = cosine_relation(img, valid, temperature=10.0)
heat = heatmap_grid(rel, (5, 6))
top = torch.topk(heat.flatten(), 3)
print("query tile (5, 6) attends most to:",
      ", ".join(f"({int(i) // 8}, {int(i) % 8}) weight {float(v):.3f}" for v, i in zip(top.values, top.indices)))

pyr_gt = build_pyramid(img, levels=3)
pyr_in = build_pyramid(img, mask, levels=3)
zero_filled = AggregatedPyramid({l: pyr_in.highs[l - 1] for l in (1, 2, 3)})
agg = wpa_aggregate(rel, pyr_in)
print(f"wavelet loss with the hole left empty: {float(wavelet_loss(zero_filled, pyr_gt, mask)):.4f}")
print(f"wavelet loss after aggregation:       {float(wavelet_loss(agg, pyr_gt, mask)):.4f}")
