"""Joint autoregressive modeling of novel views and camera poses.

Subpackages and modules:
  geometry     camera conventions, Plücker ray maps, pose recovery
  quantizer    vector-quantization primitives shared by both tokenizers
  tokenizers   image and camera-map VQ tokenizers
  sequence     unified vocabulary, sample layouts, attention masks
  transformer  decoder-only backbone with 2D RoPE, QK-Norm and a KV cache
  scenes       procedural scene generation and rendering
  harness      training loops, evaluation, checkpoints, CLI
"""

__version__ = "0.1.0"
