"""Federated learning orchestration with chunked streaming of large models."""

from .model import FLModel, decode_model, encode_model, model_linear_update

__version__ = "0.1.0"

__all__ = ["FLModel", "decode_model", "encode_model", "model_linear_update"]
