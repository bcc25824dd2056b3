"""Numerical machinery for a multi-sphere coupled latent-diffusion forecaster.

The package is organized by pipeline stage:

* :mod:`s2skit.grid` -- lat-lon geometry, latitude weights, climatology.
* :mod:`s2skit.vq` -- grouped vector-quantized embedding and its losses.
* :mod:`s2skit.diffusion` -- noise schedules, forward noising, samplers.
* :mod:`s2skit.coupling` -- cosine costs, Sinkhorn transport, the OT block,
  and the weighted mean influencing distance diagnostic.
* :mod:`s2skit.rollout` -- autoregressive latent ensemble inference.
* :mod:`s2skit.verify` -- CRPS, SSR, weighted RMSE, ACC, BSS, scorecards.
* :mod:`s2skit.attribution` -- permutation importance of predictor groups.
* :mod:`s2skit.harness` -- synthetic data, binary tensor I/O, manifests.
* :mod:`s2skit.cli` -- the ``s2sk`` command-line pipelines.
"""

__version__ = "0.1.0"
