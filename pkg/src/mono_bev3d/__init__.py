__all__ = [
    "geometry",
    "kitti_io",
    "synthdata",
    "nn",
    "optim",
    "checkpoint",
    "model",
    "training",
    "evaluation",
    "bev_render",
]
