"""Virtual refocusing of fluorescence images onto user-defined 3D surfaces.

A single 2D fluorescence image, conditioned on a per-pixel axial distance
map (DPM), is refocused by a trained adversarial network. The package also
ships everything needed to exercise the method end to end at desk scale:
a synthetic optics forward model, the preprocessing / training-set
pipeline, the LS-GAN trainer, PSF-fit and image-quality measurement tools,
and a neuron-activity clustering pipeline.
"""

__version__ = "0.1.0"
