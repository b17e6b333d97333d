"""meshrir: mesh-conditioned room impulse response generation.

Modules
-------
mesh      OBJ I/O, quadric simplification, Hausdorff distance, mesh -> graph
encoder   GCN / top-K pooling encoder and the 14-dim scene embedding
codec     16 kHz crop and the 4096-sample packed representation
acoustics EDR, EDC, T60, EDT, DRR, power spectra
gan       noise-free conditional GAN and its losses
training  configuration, training loop, checkpoints
shoebox   image-source oracle and synthetic corpora
pipeline  generation, evaluation, benchmark, speech rendering
cli       ``meshrir`` command line
"""
__version__ = "0.1.0"
