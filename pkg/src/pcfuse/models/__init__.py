from .completion import CompletionModel, ModelConfig, make_point_proxies
from .fusion import CrossModalFusion, ImageEncoder, encode_images, fuse

__all__ = ["CompletionModel", "ModelConfig", "make_point_proxies", "CrossModalFusion",
           "ImageEncoder", "encode_images", "fuse"]
