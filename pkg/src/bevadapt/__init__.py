"""Toy-scale multi-view BEV 3D perception with teacher-student domain adaptation.

The package is organised as a small stack:

- ``numerics``: dense float64 tensors, a tape-based reverse-mode gradient
  engine over a fixed primitive vocabulary, and checkpoint I/O.
- ``geometry``: the lift-splat detection pipeline (encode, depth, lift,
  pool, decode, detect) plus the supervised detection loss.
- ``uncertainty``: MC-dropout depth ensembles, per-pixel uncertainty maps,
  and lidar-guided depth fusion.
- ``adaptation``: teacher-student machinery (prototypes, alignment and
  transfer losses, uncertainty-guided EMA, pseudo labels, adapt steps).
- ``synth``: deterministic synthetic multi-view scenes with parametric
  domain-shift corruptions and corpus files.
- ``harness``: config, training loops, metrics, divergence diagnostics,
  reports, and the command line interface.
"""

__version__ = "0.1.0"
