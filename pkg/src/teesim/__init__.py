"""Deterministic discrete-event simulator of a TrustZone-style sandbox
platform: stage-2-enforced isolation, exclusive peripherals, flexible
CPU/memory adjustment, an executable attack catalogue, and bounded model
checking of the management protocol."""

__version__ = "0.1.0"
