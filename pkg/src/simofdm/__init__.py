"""Trainable stacked-metasurface OFDM link simulator.

The package models an end-to-end multi-user OFDM link whose transceivers are
metasurface stacks: bits enter a transmit DNN, propagate as complex per-subcarrier
signals through trainable phase layers and fixed diffraction matrices, cross a
geometric multipath channel (single- or dual-polarized), run the mirrored receive
stacks, and come back out of per-user DNNs as soft bits. Everything between the
bit streams is differentiable, so the whole link trains against bit error rate.
"""

__version__ = "0.1.0"
