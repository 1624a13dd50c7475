"""Training-free open-vocabulary segmentation of remote-sensing imagery on a numpy autodiff core."""

__version__ = "0.1.0"
