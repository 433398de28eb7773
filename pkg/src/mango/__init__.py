"""Meta-learning graph network simulator.

A conditional-neural-process encoder summarizes a handful of observed
simulation trials into a latent material representation; a message-passing /
temporal-convolution neural-operator decoder predicts full graph trajectories
conditioned on that latent. Ships with an autodiff substrate, baselines, a
synthetic mass-spring benchmark generator, a training loop, and an evaluation
CLI (``mango --help``).
"""

from mango.backend import compiled_available, using_compiled

__version__ = "0.1.0"

__all__ = ["compiled_available", "using_compiled", "__version__"]
