"""Block-partitioned refinement of Gaussian-splat scenes on the CPU."""
from .model import CameraView, GaussianPrimitive, GaussianScene, eval_sh, load_cameras, load_scene_ply, save_scene_ply
from .render import RenderOptions, RenderOutput, depth_to_dnormal, project_gaussian, render
from .metrics import psnr, ssim

__version__ = "0.1.0"
