"""Position estimation and performance bounds for IRS-assisted visible light positioning."""

__version__ = "0.1.0"
