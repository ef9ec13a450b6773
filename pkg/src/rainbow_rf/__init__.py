"""Deep structured random features: linearized covariances, asymptotic ridge
test error, and a Monte Carlo lab to check both."""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # pragma: no cover
    __version__ = "0.0.0"
