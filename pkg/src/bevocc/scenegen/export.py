"""On-disk dataset layout.

::

    <root>/manifest.json
    <root>/<scene_id>/calibration.json
    <root>/<scene_id>/annotations.jsonl
    <root>/<scene_id>/cam<k>/background.png
    <root>/<scene_id>/cam<k>/frame<nnnn>.png

Cameras are numbered from 1.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .scene import Scene, render_frame

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


@dataclass
class SceneEntry:
    scene_id: str
    layout: str
    num_frames: int
    num_cameras: int
    image_size: tuple[int, int]
    calibration: str
    spec: dict | None = None


@dataclass
class DatasetManifest:
    scenes: list[SceneEntry] = field(default_factory=list)
    format_version: int = FORMAT_VERSION

    def to_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "scenes": [
                {
                    "scene_id": s.scene_id,
                    "layout": s.layout,
                    "num_frames": s.num_frames,
                    "num_cameras": s.num_cameras,
                    "image_size": list(s.image_size),
                    "calibration": s.calibration,
                    **({"spec": s.spec} if s.spec is not None else {}),
                }
                for s in self.scenes
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        scenes = [
            SceneEntry(
                s["scene_id"], s.get("layout", "unknown"), int(s["num_frames"]), int(s["num_cameras"]),
                tuple(s["image_size"]), s["calibration"], s.get("spec"),
            )
            for s in d["scenes"]
        ]
        return cls(scenes, int(d.get("format_version", FORMAT_VERSION)))

    def save(self, root: Path) -> None:
        _write_text(root / "manifest.json", json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, root: str | Path) -> "DatasetManifest":
        path = Path(root) / "manifest.json"
        try:
            return cls.from_dict(json.loads(path.read_text()))
        except FileNotFoundError:
            raise FileNotFoundError(f"no dataset manifest at {path}") from None


def _write_text(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as e:
        raise OSError(f"failed to write {path}: {e}") from e


def write_png(path: Path, img: np.ndarray) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(img).save(path, format="PNG")
    except OSError as e:
        raise OSError(f"failed to write {path}: {e}") from e


def camera_dir(root: Path, scene_id: str, cam: int) -> Path:
    """Directory of 0-based camera ``cam``."""
    return Path(root) / scene_id / f"cam{cam + 1}"


def frame_name(frame_id: int) -> str:
    return f"frame{frame_id:04d}.png"


def export_scene(scene: Scene, root: Path) -> SceneEntry:
    sid = scene.spec.scene_id
    calib = {"cameras": [c.to_dict() for c in scene.cameras]}
    _write_text(root / sid / "calibration.json", json.dumps(calib, indent=2, sort_keys=True))
    for k, bg in enumerate(scene.backgrounds()):
        write_png(camera_dir(root, sid, k) / "background.png", bg)
    lines = []
    for f in range(scene.spec.num_frames):
        fr = render_frame(scene, f)
        for k, img in enumerate(fr.images):
            write_png(camera_dir(root, sid, k) / frame_name(f), img)
        rec = {
            "frame_id": f,
            "agents": [a.to_dict() for a in fr.annotations],
            "boxes2d": [
                [{"agent_id": aid, "box": box} for aid, box in sorted(cam_boxes.items())]
                for cam_boxes in fr.boxes2d
            ],
        }
        lines.append(json.dumps(rec, sort_keys=True))
    _write_text(root / sid / "annotations.jsonl", "\n".join(lines) + "\n")
    return SceneEntry(
        sid, scene.spec.layout, scene.spec.num_frames, len(scene.cameras),
        tuple(scene.spec.image_size), f"{sid}/calibration.json", scene.spec.to_dict(),
    )


def export_dataset(scenes, out_dir: str | Path) -> DatasetManifest:
    root = Path(out_dir)
    manifest = DatasetManifest()
    for scene in scenes:
        log.info("exporting %s (%d frames)", scene.spec.scene_id, scene.spec.num_frames)
        manifest.scenes.append(export_scene(scene, root))
    manifest.save(root)
    return manifest
