"""Meta-learning with a learned block-wise mirror map.

Modules: ``autodiff`` (second-order reverse mode), ``tasks`` (few-shot task
families), ``model`` (MLP learner), ``mirror_map`` (maps from dual to
primal space), ``inner`` (GD, PGD and mirror descent), ``meta`` (outer
training, evaluation, checkpoints) and ``cli``.
"""

__version__ = "0.1.0"
