"""Training harness: 3D U-Net, composite loss, exchange-protocol predictor."""

__version__ = "0.1.0"
