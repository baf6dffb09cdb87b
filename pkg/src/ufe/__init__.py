"""Semi-supervised audio-visual segmentation with motion cues, on a numpy autodiff core.

Submodules are imported lazily so that ``ufe.cli`` can set BLAS thread
variables before numpy loads.
"""

__version__ = "0.1.0"
