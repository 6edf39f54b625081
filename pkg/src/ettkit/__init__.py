"""Effect-of-treatment-on-the-treated estimation for run-expectancy outcomes.

Layers: data ingestion and run-expectancy scoring, a synthetic-data generator
with known ground truth, three estimators (matched g-computation, odds
weighting, instrumented two-stage regression), and a service plus CLI surface.
"""

__version__ = "0.1.0"

from .run_expectancy import (
    BaseOutState,
    PlayTransition,
    RunExpectancyMatrix,
    build_re_matrix,
    delta_run_expectancy,
)

__all__ = [
    "BaseOutState",
    "PlayTransition",
    "RunExpectancyMatrix",
    "build_re_matrix",
    "delta_run_expectancy",
    "EttEstimate",
    "MatchSpec",
    "IvSpec",
    "ScmConfig",
    "__version__",
]


def __getattr__(name):
    # Heavy submodules load lazily so `import ettkit` stays cheap.
    if name == "EttEstimate":
        from .weighting import EttEstimate

        return EttEstimate
    if name == "MatchSpec":
        from .matching import MatchSpec

        return MatchSpec
    if name == "IvSpec":
        from .iv import IvSpec

        return IvSpec
    if name == "ScmConfig":
        from .scm import ScmConfig

        return ScmConfig
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
