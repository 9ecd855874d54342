"""Privacy-tiered publish/subscribe for smart-metering telemetry."""

__version__ = "0.1.0"
