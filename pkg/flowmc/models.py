import enum


class TransformKind(str, enum.Enum):
    """Coupling transform families"""
    ADDITIVE = "additive"
    AFFINE = "affine"
    PIECEWISE_LINEAR = "piecewise_linear"
    PIECEWISE_QUADRATIC = "piecewise_quadratic"


class PartitionScheme(str, enum.Enum):
    """How dimensions are split into partitions A and B"""
    HALF = "half"
    EVEN_ODD = "even_odd"


class LossKind(str, enum.Enum):
    KL = "kl"
    CHI2 = "chi2"


class ProposalKind(str, enum.Enum):
    """Where training samples are drawn from"""
    FLOW = "flow"
    UNIFORM = "uniform"


class GuidingVariant(str, enum.Enum):
    """Sampling strategies compared by the guiding benchmark"""
    FLOW_ONLY = "flow_only"
    ANALYTIC_ONLY = "analytic_only"
    MIS_FIXED = "mis_fixed"
    MIS_LEARNED = "mis_learned"


class Precision(str, enum.Enum):
    FLOAT64 = "float64"
    FLOAT32 = "float32"
