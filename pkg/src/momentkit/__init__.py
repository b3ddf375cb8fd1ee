"""momentkit: joint video moment retrieval and highlight detection.

Operates on pre-extracted clip-level features. Includes a self-contained
float64 autodiff core, a bottleneck-fused multi-modal transformer, keypoint
style moment decoding, retrieval/highlight metrics, and a training CLI.
"""

from __future__ import annotations

__version__ = "0.1.0"
