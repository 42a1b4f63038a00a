"""Few-shot IoT device fingerprinting from packet info strings."""
from .codec import CodecConfig, DeviceTrace
from .matcher import FingerprintModel, build_fingerprint, load_model, save_model, scan_stream

__all__ = ["CodecConfig", "DeviceTrace", "FingerprintModel", "build_fingerprint", "load_model", "save_model", "scan_stream"]
__version__ = "0.1.0"
