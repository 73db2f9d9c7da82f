"""Cross-resolution domain-adaptive semantic segmentation.

A multi-task generator (shared extractor, super-resolution decoder,
segmentation head) is trained adversarially against a pixel-level PatchGAN
and an output-space discriminator, so a model supervised only on
low-resolution source imagery can segment high-resolution target imagery.
Everything runs on a self-contained numpy autodiff core.
"""

__version__ = "0.1.0"
