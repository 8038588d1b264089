"""Token-reweighted RLVR on a synthetic image-question task.

Modules: ``diffcore`` (reverse-mode autodiff), ``synthtask`` (grid counting
task and verifier), ``policy`` (tiny decoder), ``scoring`` (entropies and
visual sensitivity), ``selection`` (percentile token sets and weight masks),
``objectives`` (GRPO/DAPO and their token-weighted forms), ``trainer``,
``analysis`` and ``cli``.
"""
from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.0.0+local"
