"""
SwinFi - CSI compression library

Swin Transformer autoencoder for Wi-Fi channel state information, on a
numpy autodiff engine, with preprocessing, synthetic data, wire and
checkpoint formats, training and streaming.
"""

__version__ = "1.0.0"

# Module imports
from . import errors
from . import tensor
from . import csiprep
from . import layers
from . import model
from . import syndata
from . import runconfig
from . import wire
from . import checkpoint
from . import training
from . import stream
from . import grid
