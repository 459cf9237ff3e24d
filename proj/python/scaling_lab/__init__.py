"""Python access to the scaling lab: token sources, a few statistics helpers
and the experiment runner."""

from ._core import (
    Source,
    __version__,
    bootstrap_mean_ci,
    derive_seed,
    entropy_rate,
    hoeffding_tail,
    parameter_count,
    power_law_fit,
    render_plots,
    run,
    sample,
    spearman,
    validate_config,
)

__all__ = [
    "Source",
    "__version__",
    "bootstrap_mean_ci",
    "derive_seed",
    "entropy_rate",
    "hoeffding_tail",
    "parameter_count",
    "power_law_fit",
    "render_plots",
    "run",
    "sample",
    "spearman",
    "validate_config",
]
