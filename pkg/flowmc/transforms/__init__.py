from flowmc.errors import InvalidConfigError
from flowmc.models import TransformKind
from flowmc.transforms.affine import AdditiveTransform, AffineTransform, affine_warp, logit_affine
from flowmc.transforms.base import BaseTransform
from flowmc.transforms.piecewise_linear import (
    PiecewiseLinearTransform,
    PwlParams,
    normalize_pwl,
    pwl_unwarp,
    pwl_warp,
)
from flowmc.transforms.piecewise_quadratic import (
    PiecewiseQuadraticTransform,
    PwqParams,
    normalize_pwq,
    pwq_unwarp,
    pwq_warp,
)

_TRANSFORMS = {
    TransformKind.ADDITIVE: AdditiveTransform,
    TransformKind.AFFINE: AffineTransform,
    TransformKind.PIECEWISE_LINEAR: PiecewiseLinearTransform,
    TransformKind.PIECEWISE_QUADRATIC: PiecewiseQuadraticTransform,
}


def make_transform(kind: TransformKind, bins: int = 32) -> BaseTransform:
    """Get the transform implementation for a coupling kind"""
    kind = TransformKind(kind)
    if bins < 1:
        raise InvalidConfigError(f"bin count must be positive, got {bins}")
    return _TRANSFORMS[kind](bins)


__all__ = [
    "AdditiveTransform",
    "AffineTransform",
    "BaseTransform",
    "PiecewiseLinearTransform",
    "PiecewiseQuadraticTransform",
    "PwlParams",
    "PwqParams",
    "affine_warp",
    "logit_affine",
    "make_transform",
    "normalize_pwl",
    "normalize_pwq",
    "pwl_unwarp",
    "pwl_warp",
    "pwq_unwarp",
    "pwq_warp",
]
