"""isograd: grid-based implicit surface reconstruction from posed RGB images
with closed-form ray intersections and differentiable truncated alpha
compositing."""

from .errors import (ConvergenceWarning, DegenerateFieldError, EmptyCloudError,
                     FormatError, IsogradError, NonFiniteLossError,
                     OutOfBoundsError, PrunedVoxelError)
from .field import (LocalPoint, VoxelGrid, eval_sh, field_gradient,
                    sample_channel, surface_normal, trilinear_interp,
                    vertex_finite_diff)
from .intersect import (Cubic, Intersection, Ray, RootStatus, VoxelHit,
                        cubic_coeffs, ray_aabb, ray_intersections, solve_cubic,
                        traverse_voxels, voxel_intersections)
from .render import (RaySamples, RenderConfig, composite, cull,
                     opacity_activation, render_image, render_ray,
                     trunc_window)
from .grad import GradBuffer, backward_ray, fd_check, root_gradient
from .loss import (LossWeights, RayBatch, convergence_loss, eikonal_loss,
                   entropy_loss, normal_smoothness, photometric,
                   sparsity_loss, total_loss, tv_loss)
from .initialization import (DensityGrid, FitConfig, build_surface_grid,
                             fit_density, init_opacity, init_surface, prune)
from .scene import (Camera, Dataset, SyntheticScene, generate_ray,
                    load_dataset, make_dataset, make_scene, reference_render,
                    save_dataset)
from .train import (OptimizerState, TrainConfig, anneal_a, lr_schedule,
                    rmsprop_step, train)
from .eval import (SurfacePoints, chamfer_l1, downsample, extract_points,
                   trim)

__version__ = "0.1.0"
