"""hypoheat: heat kernels, Gaussian bounds and Harnack ratios for sums of squares
of homogeneous Hörmander vector fields with variable coefficients.

Modules
-------
fields      exact polynomial vector fields, brackets, stratified Lie algebras
lift        lifting to a homogeneous Carnot group (group law, lifted fields)
metric      Carnot-Carathéodory distance, ball volumes, the Gaussian function E
kernel      constant-coefficient heat kernels on the lifted group and projected
parametrix  Levi parametrix for Hölder-continuous coefficients, Cauchy problem
harnack     empirical parabolic and stationary Harnack ratios
cli         the ``hypoheat`` command
"""

__version__ = "0.1.0"

from .fields import (  # noqa: E402
    FieldSystem,
    FieldSystemError,
    RankDeficientAtZero,
    StratifiedAlgebra,
    VectorField,
    example,
    generate_algebra,
    load_field_system,
    parse_field_system,
)
from .lift import CarnotLift, build_lift, lift_function  # noqa: E402

__all__ = [
    "__version__",
    "FieldSystem",
    "FieldSystemError",
    "RankDeficientAtZero",
    "StratifiedAlgebra",
    "VectorField",
    "example",
    "generate_algebra",
    "load_field_system",
    "parse_field_system",
    "CarnotLift",
    "build_lift",
    "lift_function",
]
