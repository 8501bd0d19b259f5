"""Predicting articulated part motion from two observed frames.

Modules: ``synthgen`` (synthetic objects and datasets), ``geom`` (geometric
kernels), ``transport`` (EMD and the training loss), ``model`` (the network),
``train``, ``evaluation`` and ``cli``.
"""

__version__ = "0.1.0"
