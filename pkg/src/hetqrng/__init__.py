"""Post-detection pipeline for a heterodyne source-device-independent QRNG."""

__version__ = "0.1.0"
