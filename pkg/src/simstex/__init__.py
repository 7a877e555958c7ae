"""Multiview-interlaced latent texture sampler.

Renders a shared latent texture into camera views, denoises each view with a
pluggable epsilon predictor (analytic oracles or a remote diffusion-model
bridge), and aggregates the per-view updates back onto the texture after
every denoising step.  A hash-grid color field distills the final views into
an RGB texture.
"""

from .diffusion import (GuidanceConfig, NoiseSchedule, cfg_combine, ddim_sigma,
                        ddim_step, make_schedule, predict_x0, stochastic_encode)
from .denoiser import (DeltaOracle, DeltaTextureOracle, DenoiseRequest,
                       GaussianOracle, GaussianOracleParams, RemoteDenoiser,
                       ZeroDenoiser)
from .geometry import (Camera, CameraPreset, TriMesh, load_obj, make_cameras,
                       naive_atlas, normalize_mesh, prompt_view_suffix,
                       save_obj, texture_resolution)
from .rasterizer import (RasterOutput, fill_background, inverse_render,
                         normalized_depth, rasterize, render_texture)
from .sims import (PipelineResult, SimsConfig, SimsResult, aggregate_view,
                   renoise_visited, sims_round, texture_pipeline)
from .colorfield import (DistillSample, HashGridConfig, HashGridField,
                         bake_texture, distill, field_forward, hash_encode)

__version__ = "0.1.0"
