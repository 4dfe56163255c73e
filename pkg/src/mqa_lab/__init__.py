"""Multi-head vs multi-query attention laboratory.

Validated einsum-style kernels for both attention kinds in batched and
incremental form, immutable key/value caches with growing and padded
layouts, an exact flop/word cost model with rational ratios, a parameter
parity solver, a desk-scale transformer with hand-written gradients, and a
decode benchmark harness.
"""

__version__ = "0.1.0"
