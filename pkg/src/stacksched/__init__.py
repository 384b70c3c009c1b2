"""stacksched: thermal-aware kernel scheduling on 3D-stacked many-core chips.

Simulates transformer inference pipelines (embedding / attention / FFN /
LM-head kernels) on a 3D grid of cores with distributed cache banks, an
RC thermal network, DVFS power capping, and learned migration policies
distilled from a Gaussian-process oracle.
"""

__version__ = "0.1.0"
