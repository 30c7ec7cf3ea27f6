"""diffserve: a desk-scale latent diffusion inference service.

Pure-numpy toy models behind the same moving parts a production image
service has: pluggable noise schedulers, LoRA / ControlNet adapters,
a FastAPI front door, an optional multi-worker router, and a
benchmarking harness for the optimization toggles.
"""

__version__ = "0.1.0"
