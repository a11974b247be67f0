"""stec: a learned image/video codec built around spatial-temporal
energy compaction.

Still images are coded by a convolutional (or exact linear subband)
autoencoder with a trainable factorized entropy model and a bit-exact
range coder. Video rides on top of the image codec through a hierarchical
interpolation loop whose GOP size adapts to the temporal energy of the
content.
"""

from stec.errors import (
    ContainerFormatError,
    DegenerateInputError,
    MediaFormatError,
    ModelFormatError,
    RangeCoderError,
    StecError,
    TrainingDiverged,
)

__version__ = "0.1.0"
