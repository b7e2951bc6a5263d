"""Long-horizon closed-loop traffic simulation with interleaved
motion-simulation and scene-generation token prediction."""

__version__ = "0.1.0"
