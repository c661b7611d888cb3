"""SimplexLink - coherent optical link simulator for 3D-Simplex and DP-BPSK."""

__version__ = "0.1.0"
