"""Differentiable gated-imaging simulator and voxel-grid scene reconstruction."""
from .gating import (SPEED_OF_LIGHT, AttenuationModel, GatingModel, GatingParams, ParameterDomainError,
                     gated_pixel, profile, profile_grad, profile_numeric_oracle)
from .illum import (DegenerateRayError, IlluminatorModel, IlluminatorModule, cone_intensity, illuminator_ray,
                    shadow_transmittance)
from .field import GridFormatError, ProposalGrid, SceneGrid, load_grid, save_grid
from .render import (Intrinsics, RenderOptions, Rays, SampleSet, camera_rays, render_components, render_depth,
                     render_gated, render_image, render_passive, render_rays, sample_camera_ray)

__version__ = "0.1.0"
