"""Ultrafast ultrasound reconstruction toolkit.

Two-step pipeline: re-weighted delay-and-sum backprojection of single-shot
acquisitions, followed by a residual multi-scale convolutional restorer trained
with a signed-logarithmic loss. Simulation, metrics and a small CLI are
included so that every stage can be run at desk scale.
"""

from usrecon.core import (
    Image,
    ImageGrid,
    ImagingConfig,
    PulseEchoWaveform,
    RawData,
    Scheme,
    TransducerArray,
    apply_tgc,
    bmode,
    envelope,
    make_grid,
    make_preset_config,
    make_pulse_echo_waveform,
    rf_to_iq,
)
from usrecon.wavefield import Transmitter

__all__ = [
    "Image",
    "ImageGrid",
    "ImagingConfig",
    "PulseEchoWaveform",
    "RawData",
    "Scheme",
    "TransducerArray",
    "Transmitter",
    "apply_tgc",
    "bmode",
    "envelope",
    "make_grid",
    "make_preset_config",
    "make_pulse_echo_waveform",
    "rf_to_iq",
]

__version__ = "0.1.0"
