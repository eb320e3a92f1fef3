from . import tape as _tape
from .gradcheck import GradCheckReport, SlotCheck, grad_check
from .tape import (
    AutodiffError,
    DomainError,
    MissingBindingError,
    Node,
    NonFiniteError,
    Tape,
    Var,
    available_backends,
    div,
    exp,
    fabs,
    log,
    maximum,
    minimum,
    power,
    relu,
    set_backend,
    value_of,
)


def active_backend() -> str:
    return _tape.BACKEND


__all__ = [
    "AutodiffError", "DomainError", "MissingBindingError", "NonFiniteError",
    "Node", "Tape", "Var", "GradCheckReport", "SlotCheck", "grad_check",
    "available_backends", "active_backend", "set_backend",
    "div", "exp", "fabs", "log", "maximum", "minimum", "power", "relu", "value_of",
]
