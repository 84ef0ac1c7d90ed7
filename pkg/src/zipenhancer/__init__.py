"""ZipEnhancer: dual-path down-up sampling Zipformer speech enhancement in numpy."""

from .codec import ZipEnhancer, enhance
from .config import preset
from .dsp import StftConfig, Waveform, read_wav, write_wav
from .zipblocks import ModelConfig

__all__ = ["ZipEnhancer", "enhance", "preset", "StftConfig", "Waveform", "read_wav", "write_wav",
           "ModelConfig"]
__version__ = "0.1.0"
