"""Uncertainty-aware conditional radiance fields for sparse-view scene reconstruction.

Modules:

* :mod:`ucnerf.synthscene` - procedural scenes, cameras, sparse/prior depth, dataset I/O
* :mod:`ucnerf.raycore` - rays, sampling, positional encoding, volume compositing
* :mod:`ucnerf.sweep` - plane-sweep cascade, uncertainty map, consistency loss
* :mod:`ucnerf.field` - dual-branch conditional radiance field
* :mod:`ucnerf.distill` - training losses and patch partitioning
* :mod:`ucnerf.metrics` - image and depth metrics
* :mod:`ucnerf.oracle` - brute-force reference computations
* :mod:`ucnerf.harness` - configuration, training, evaluation, CLI
"""

__version__ = "0.1.0"
