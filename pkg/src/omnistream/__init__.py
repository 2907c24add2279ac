"""Streaming vision transformer with a persistent KV cache.

Causal spatiotemporal attention over per-frame token groups, 3-axis rotary
position encoding, geometric prediction heads, the full multi-task loss
suite with hand-written gradients, and a benchmark/verification CLI.
"""

from .attention import (AttentionConfig, CapacityError, KVCache,
                        active_backend, available_backends, attention_flops,
                        cached_attention_step, full_causal_attention,
                        set_backend)
from .backbone import BackboneConfig, BackboneOutput, forward_full, init_params
from .engine import (CacheStats, EngineConfig, StreamSession, cache_stats,
                     checkpoint_load, checkpoint_save, config_load,
                     config_save, forward_offline, init_engine_params,
                     session_new, session_push, synth_scene, toy_train)
from .heads import (GeometricPrediction, GeometricTargets, camera_head,
                    compose_points, depth_ray_head)
from .losses import (LossReport, LossWeights, caption_loss, depth_loss,
                     dino_loss, ema_update, gram_loss, ibot_loss, koleo_loss,
                     ray_point_camera_loss, sinkhorn_center, total_loss)
from .rope3d import RopeConfig, apply_rope, jitter_positions, plan_axes
from .tokenizer import FrameStream, TokenLayout, patchify, position_of, tau

__version__ = "0.1.0"

__all__ = [
    "AttentionConfig", "BackboneConfig", "BackboneOutput", "CacheStats",
    "CapacityError", "EngineConfig", "FrameStream", "GeometricPrediction",
    "GeometricTargets", "KVCache", "LossReport", "LossWeights", "RopeConfig",
    "StreamSession", "TokenLayout", "active_backend", "apply_rope",
    "attention_flops", "available_backends", "cache_stats",
    "cached_attention_step", "camera_head", "caption_loss", "checkpoint_load",
    "checkpoint_save", "compose_points", "config_load", "config_save",
    "depth_loss", "depth_ray_head", "dino_loss", "ema_update",
    "forward_full", "forward_offline", "full_causal_attention", "gram_loss",
    "ibot_loss", "init_engine_params", "init_params", "jitter_positions",
    "koleo_loss", "patchify", "plan_axes", "position_of",
    "ray_point_camera_loss", "session_new", "session_push", "set_backend",
    "sinkhorn_center", "synth_scene", "tau", "total_loss", "toy_train",
]
