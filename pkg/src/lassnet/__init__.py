"""Language-queried audio source separation on a from-scratch autodiff engine."""

__version__ = "0.1.0"
