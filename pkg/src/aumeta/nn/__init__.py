from . import attention, kernels, layers

__all__ = ["attention", "kernels", "layers"]
