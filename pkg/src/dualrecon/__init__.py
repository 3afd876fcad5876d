"""Implicit surface reconstruction from noisy point clouds with dual point/grid latents."""
from .estimator import OccupancyReconstructor
from .model import DualLatentModel, Latents, ModelConfig
from .oracles import Box, Sphere, ThinPlate, Torus, Union
from .pointgrid import GridLatent, PointCloud, WindowPartition, normalize_points
from .surface import Mesh, OccupancyGrid, eval_occupancy_grid, marching_cubes, metrics
from .trainer import TrainConfig, bce_loss, cosine_lr, sample_training_pair, train

__version__ = "0.1.0"
