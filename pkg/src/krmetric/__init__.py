"""Exact Kantorovich-Rubinshtein distance on finitely supported measures, invariant
measures of contraction systems, and constructive Lipschitz/tightness tools."""

from .errors import DomainError, KRError, PreconditionError, PremiseError
from .metric_core import (
    LipFunction,
    MetricSpace,
    distance_function,
    envelope,
    lip_constant,
    lip_witness,
    mcshane_extend,
    validate_space,
)
from .measures import DiscreteMeasure, coarsen, dirac, first_moment, integrate, mixture, pushforward
from .transport import TransportCertificate, dual_evaluate, kr_distance, verify_certificate
from .hutchinson import (
    ContractionMap,
    ContractionSystem,
    IterationReport,
    iterate_invariant,
    markov_step,
    operator_gap,
    truncate_countable,
)
from .diagnostics import (
    MeasureSequence,
    WitnessArtifacts,
    assertion_1_1_sequence,
    build_witness,
    cauchy_profile,
    lemma_3_7_sequence,
    tightness_cover,
    verify_witness,
)

__version__ = "0.1.0"
