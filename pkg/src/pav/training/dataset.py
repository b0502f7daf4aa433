"""Frames, scenes and their on-disk layout."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import imageio
from ..errors import InvalidInputError
from ..geometry import Mesh, read_obj, read_verts, write_obj, write_verts
from ..rasterizer import rasterize_depth, ray_distance
from ..renderer import Camera

SPLITS = ("train", "test")


@dataclass
class TrainingFrame:
    index: int
    appearance: int
    split: str
    image: np.ndarray  # (H, W, 3) in [0, 1], background white
    mask: np.ndarray  # (H, W) face region for the depth loss
    mesh: Mesh  # tracked mesh in observation space
    expression: np.ndarray  # (E,)
    camera: Camera
    pose: np.ndarray | None = None  # generator bookkeeping: yaw, pitch, roll, shift
    _depth: np.ndarray | None = field(default=None, repr=False)

    @property
    def key(self) -> str:
        return f"{self.appearance}:{self.index}"

    def ray_depth(self) -> np.ndarray:
        """Rasterized tracked-mesh depth as distance along each pixel ray (inf where empty)."""
        if self._depth is None:
            self._depth = ray_distance(rasterize_depth(self.mesh, self.camera), self.camera)
        return self._depth


@dataclass
class SceneDataset:
    canonical: Mesh
    frames: list[TrainingFrame]
    n_appearances: int
    config: object | None = None

    def __post_init__(self):
        present = sorted({f.appearance for f in self.frames})
        if present != list(range(self.n_appearances)):
            raise InvalidInputError("appearance indices must be dense and each needs a frame")

    def split(self, name: str) -> list[TrainingFrame]:
        if name == "all":
            return list(self.frames)
        return [f for f in self.frames if f.split == name]

    def find(self, appearance: int, index: int) -> TrainingFrame:
        for f in self.frames:
            if f.appearance == appearance and f.index == index:
                return f
        raise KeyError(f"no frame {appearance}:{index}")

    @property
    def expression_dim(self) -> int:
        return len(self.frames[0].expression)

    def save(self, root) -> None:
        root = Path(root)
        (root / "meshes").mkdir(parents=True, exist_ok=True)
        write_obj(self.canonical, root / "meshes" / "canonical.obj")
        records = []
        for f in self.frames:
            j, i = f.appearance, f.index
            rec = {
                "appearance": j, "index": i, "split": f.split,
                "image": f"frames/{j}/{i}.png", "mask": f"masks/{j}/{i}.png",
                "mesh": f"meshes/{j}/{i}.verts", "depth": f"depth/{j}/{i}.png",
                "expression": [float(x) for x in f.expression],
                "camera": f.camera.to_dict(),
            }
            if f.pose is not None:
                rec["pose"] = [float(x) for x in f.pose]
            imageio.write_rgb(root / rec["image"], f.image)
            imageio.write_mask(root / rec["mask"], f.mask)
            (root / rec["mesh"]).parent.mkdir(parents=True, exist_ok=True)
            write_verts(f.mesh.vertices, root / rec["mesh"])
            imageio.write_depth(root / rec["depth"], rasterize_depth(f.mesh, f.camera).depth)
            records.append(rec)
        manifest = {
            "format": "pav-scene-1",
            "n_appearances": self.n_appearances,
            "n_frames": len(self.frames),
            "expression_dim": self.expression_dim,
            "canonical": "meshes/canonical.obj",
            "generator": getattr(self.config, "__dict__", None),
            "frames": records,
        }
        (root / "scene.json").write_text(json.dumps(manifest, indent=1) + "\n")

    @classmethod
    def load(cls, root) -> "SceneDataset":
        root = Path(root)
        manifest_path = root / "scene.json"
        if not manifest_path.exists():
            raise FileNotFoundError(f"{manifest_path} not found")
        manifest = json.loads(manifest_path.read_text())
        canonical = read_obj(root / manifest["canonical"])
        frames = []
        for rec in manifest["frames"]:
            verts = read_verts(root / rec["mesh"], canonical.n_vertices)
            frames.append(TrainingFrame(
                index=int(rec["index"]), appearance=int(rec["appearance"]), split=rec["split"],
                image=imageio.read_rgb(root / rec["image"]), mask=imageio.read_mask(root / rec["mask"]),
                mesh=canonical.with_vertices(verts), expression=np.array(rec["expression"], dtype=np.float64),
                camera=Camera.from_dict(rec["camera"]),
                pose=np.array(rec["pose"]) if "pose" in rec else None))
        return cls(canonical, frames, int(manifest["n_appearances"]))
