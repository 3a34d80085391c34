"""dimmask: learn embedding table widths during a single training run.

Each embedding table gets one trainable scalar that positions a soft mask
over its columns; training prunes or grows the open width, and the model can
then be trimmed to the discovered sizes and re-exported.
"""

__version__ = "0.1.0"

from .errors import InputError

__all__ = ["InputError", "__version__"]
