"""elnet: label enhancement and automatic annotation for binary segmentation.

Subpackages are imported lazily by the tooling that needs them; import the
module you want directly, e.g. ``from elnet import tensor`` or
``from elnet.quality import evaluate``.
"""

__version__ = "0.1.0"
