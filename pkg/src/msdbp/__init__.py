"""msdbp: simulation and learning workbench for multi-step DBP receivers.

Subpackages cover the forward fiber channel (split-step simulator with
dispersion, Kerr nonlinearity, PMD and amplifier noise), multi-step
digital backpropagation with short learnable FIR filters, subband
processing with MIMO intensity coupling, multi-step PMD compensation,
and the SGD training machinery (reverse-mode differentiation, L1
regularization, pruning, fake quantization) that ties them together.
"""

__version__ = "0.1.0"
