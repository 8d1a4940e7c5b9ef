from .export import DatasetManifest, SceneEntry, camera_dir, export_dataset, frame_name
from .layout import LAYOUTS, RoadLayout
from .render import Box
from .scene import AgentTrack, RenderedFrame, Scene, SceneSpec, generate_scene, render_frame

__all__ = [
    "AgentTrack",
    "Box",
    "DatasetManifest",
    "LAYOUTS",
    "RenderedFrame",
    "RoadLayout",
    "Scene",
    "SceneEntry",
    "SceneSpec",
    "camera_dir",
    "export_dataset",
    "frame_name",
    "generate_scene",
    "render_frame",
]
