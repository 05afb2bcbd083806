"""Estimation of in-person election effects on epidemic mortality.

Two pipelines:

* a matched, generalized difference-in-differences estimator of the
  average treatment effect on the treated (ATT) for staggered county-level
  treatments, and
* a semi-mechanistic Bayesian renewal-equation model of state-level
  transmissibility fitted to daily death counts.
"""

__version__ = "0.1.0"

from voteimpact.delays import DelayModel, GammaSpec, DailyPmf
from voteimpact.panel import (
    AnalysisPanel,
    CountySeries,
    CovariateRecord,
    TreatmentSchedule,
    build_panel,
    parse_deaths,
)

__all__ = [
    "AnalysisPanel",
    "CountySeries",
    "CovariateRecord",
    "DailyPmf",
    "DelayModel",
    "GammaSpec",
    "TreatmentSchedule",
    "build_panel",
    "parse_deaths",
]
