"""Class-conditional 3D patch in-painting with local/global Wasserstein critics.

Subpackage layout:

* :mod:`nodulesynth.volume_io` -- ``.vol`` container I/O and annotation tables
* :mod:`nodulesynth.patches` -- patch extraction, masking, phantom data
* :mod:`nodulesynth.generator` -- coarse-to-fine in-painting generator
* :mod:`nodulesynth.critics` -- local/global critics with auxiliary class heads
* :mod:`nodulesynth.losses` -- reconstruction / WGAN-GP / class objectives
* :mod:`nodulesynth.training` -- staged GAN trainer and bulk synthesis
* :mod:`nodulesynth.classifier` -- 3D residual classifier harness
* :mod:`nodulesynth.metrics` -- ACC/SEN/SPE/AUC reporting
* :mod:`nodulesynth.cli` -- command-line entry point
"""

from nodulesynth.volume_io import Volume, NoduleAnnotation, load_volume, save_volume
from nodulesynth.patches import PatchSample, PipelineConfig

__all__ = [
    "Volume",
    "NoduleAnnotation",
    "load_volume",
    "save_volume",
    "PatchSample",
    "PipelineConfig",
]

__version__ = "0.1.0"
