"""Two-stream feature-aggregation video object detector (CPU reference).

Subpackages cover the dense kernels (compiled core + numpy fallback), the
shared feature pyramid, the flow-warping and deformable-sampling streams,
anchor heads, losses with analytic gradients, NMS/Seq-NMS postprocessing,
a stratified detection evaluator, a synthetic video generator with exact
flow, and the `ssvd` command line pipeline.
"""

__version__ = "0.1.0"
