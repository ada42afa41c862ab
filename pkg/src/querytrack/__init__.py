"""querytrack: staged query-guided object localization in short videos."""

from .precision import default_dtype, precision, set_default_dtype

__all__ = ["default_dtype", "precision", "set_default_dtype"]
__version__ = "0.1.0"
