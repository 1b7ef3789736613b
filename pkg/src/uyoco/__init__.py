"""Recursive decoder-decoder LM with a single shared global KV cache.

Five architecture families behind one config type, an incremental-decode
runtime with exact cache accounting, an analytic serving-cost model, a toy
training harness, and a layer-representation profiler.
"""

__version__ = "0.1.0"
