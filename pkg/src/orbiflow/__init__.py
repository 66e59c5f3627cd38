"""Lyapunov 1-forms and chain recurrence for flows on flat torus quotients."""
from .orbifold import GroupElement, OrbifoldPoint, QuotientPresentation
from .expr import parse
from .forms import (
    BasicOneForm,
    CohomologyClass,
    EquivariantVectorField,
    GPath,
    compute_scale,
    contraction,
    exactness_on_region,
    gpath_integral,
    period_pairing,
)
from .boxes import BoxCover
from .graph import (
    RecurrenceReport,
    TransitionGraph,
    asymptotic_pairing,
    build_graph,
    chain_recurrent_set,
    ulam_measure,
    xi_recurrent_split,
)
from .lyapunov import ConstructionRefused, LyapunovCertificate, construct_lyapunov_form, verify_lyapunov
from .flow import birkhoff_average, detect_cycle, integrate
from . import scenarios

__version__ = "0.1.0"
