"""2D Gaussian surfel splatting with per-primitive sinusoidal color heads,
trained by analytic gradients and densified by frequency-band error."""

__version__ = "0.1.0"
