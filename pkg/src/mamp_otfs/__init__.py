"""Link-level simulator for uplink MIMO-OTFS with SCMA and a memory AMP detector."""

from .baselines import lmmse_detect, map_oracle_detect, oamp_vamp_detect
from .channel import ChannelConfig, ChannelPath, ChannelRealization, sample_paths
from .harness import BerRecord, SimConfig, run_ber_sweep, run_convergence_trace
from .mamp import DetectorConfig, DetectionResult, detect
from .otfs import demodulate, modulate
from .scma import GridPlacement, ScmaCodebook, build_default_codebook

__version__ = "0.1.0"

__all__ = [
    "BerRecord",
    "ChannelConfig",
    "ChannelPath",
    "ChannelRealization",
    "DetectionResult",
    "DetectorConfig",
    "GridPlacement",
    "ScmaCodebook",
    "SimConfig",
    "build_default_codebook",
    "demodulate",
    "detect",
    "lmmse_detect",
    "map_oracle_detect",
    "modulate",
    "oamp_vamp_detect",
    "run_ber_sweep",
    "run_convergence_trace",
    "sample_paths",
]
