"""skillmerge: low-rank skill-adapter merging on a self-contained toy LM.

Subpackages cover dense-tensor autodiff, adapter checkpoint I/O, the merge
methods (CAT, linear, TIES, DARE, SLERP), training loops (skill LoRAs,
DATA-MIX, CAT coefficients, MoE routers, gradient-free hub weights),
synthetic two-skill benchmarks, and evaluation (exec-accuracy, Elo with
bootstrap, super-linearity reports).
"""

__version__ = "0.1.0"
