"""Rigid registration of 3D ultrasound volumes guided by a probe movement model."""
from .pipeline import RegistrationConfig, RegistrationResult, register
from .transform import RigidTransform
from .volume import Grid, Volume

__version__ = "0.1.0"

__all__ = ["Grid", "RegistrationConfig", "RegistrationResult", "RigidTransform", "Volume",
           "register", "__version__"]
