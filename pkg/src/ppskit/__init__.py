"""Per-pixel shading toolkit.

Turns depth maps into near-field shading maps, trains a shading-conditioned
diffusion translator between a synthetic and a real-looking image domain, and
evaluates the results (shading-consistency audits, depth metrics, Frechet
feature distance).
"""

__version__ = "0.1.0"
