"""combnet: compact 2.5D hand-pose network with an optimized embedded-style
convolution engine (channel interleaving, kernel packing, comb-decomposed
dilated convolution) and a reference backend that serves as its oracle.
"""

__version__ = "0.1.0"
