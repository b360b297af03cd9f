from .layers import LayerKind, LayerSpec
from .network import ForwardPass, ModelCost, NetworkSpec, count_params_flops, forward, infer_shapes, run
from .architectures import ARCHITECTURES, build_arch, planted_network

__all__ = [
    "LayerKind",
    "LayerSpec",
    "ForwardPass",
    "ModelCost",
    "NetworkSpec",
    "count_params_flops",
    "forward",
    "infer_shapes",
    "run",
    "ARCHITECTURES",
    "build_arch",
    "planted_network",
]
