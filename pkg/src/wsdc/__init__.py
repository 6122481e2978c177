"""Vector-quantized semantic communication over a digital QAM/AWGN link, with a
hybrid Wasserstein regularizer on codeword activations."""

__version__ = "0.1.0"
