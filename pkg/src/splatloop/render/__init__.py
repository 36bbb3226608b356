from .rasterizer import (
    InvalidPrimitiveError,
    MissingTapeError,
    RenderError,
    RenderedFrame,
    RenderOptions,
    kernels,
    render,
    render_backward,
    render_dynamic_alpha,
    render_scene,
)

__all__ = [
    "InvalidPrimitiveError",
    "MissingTapeError",
    "RenderError",
    "RenderedFrame",
    "RenderOptions",
    "kernels",
    "render",
    "render_backward",
    "render_dynamic_alpha",
    "render_scene",
]
