"""Proximal estimation of the population intervention indirect effect."""

from .bridges import (
    BridgeParams,
    InstrumentBasis,
    eval_h0,
    eval_h1,
    eval_q0,
    eval_q1,
    fit_bridges,
    fit_h0,
    fit_h1,
    fit_q0,
    fit_q1,
)
from .bootstrap import BootstrapResult, bootstrap, bootstrap_many
from .data import ColumnRoles, Dataset, empirical_mean_y, load_csv, write_csv
from .errors import (
    BootstrapStabilityError,
    ConditioningError,
    ConfigError,
    DataError,
    DomainError,
    EmptyDataError,
    IOFailure,
    PreconditionError,
    ProxmedError,
    RankDeficiencyError,
    SchemaError,
    SolverError,
)
from .estimators import (
    EstimateReport,
    PsiEstimate,
    dr_frontdoor,
    eif_value,
    estimate,
    piie,
    psi_phybrid,
    psi_pipw,
    psi_pmr,
    psi_por,
)

__version__ = "0.1.0"
