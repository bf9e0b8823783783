"""Dataset manifests, PNG I/O and in-memory task datasets."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from multirestore.degradations import DegradationKind, apply_degradation, quantize8
from multirestore.errors import ConfigurationError
from multirestore.scenes import Scene, generate_scenes

LABELS_FILE = "labels.json"


def read_rgb(path: str | Path) -> torch.Tensor:
    """Read an 8-bit RGB PNG into a (3, H, W) float tensor in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return torch.from_numpy(arr.copy()).permute(2, 0, 1).to(torch.float32) / 255.0


def write_rgb(path: str | Path, img: torch.Tensor) -> None:
    arr = (quantize8(img.detach().cpu().to(torch.float64)) * 255.0).round().to(torch.uint8)
    Image.fromarray(arr.permute(1, 2, 0).numpy(), mode="RGB").save(path, format="PNG")


def read_mask(path: str | Path) -> torch.Tensor:
    with Image.open(path) as im:
        return torch.from_numpy(np.asarray(im, dtype=np.uint8).copy()).to(torch.int64)


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


@dataclass
class ManifestEntry:
    clean_path: str
    kind: str
    severity: int
    seed: int
    label: dict = field(default_factory=dict)
    degraded_path: str | None = None

    @property
    def degradation(self) -> DegradationKind:
        return DegradationKind(self.kind, self.severity)


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    seed: int
    root: Path | None = None

    def __len__(self) -> int:
        return len(self.entries)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        if p.is_absolute() or self.root is None:
            return p
        return self.root / p

    def to_records(self) -> list[dict]:
        return [asdict(e) for e in self.entries]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.to_records())

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(f"seed={self.seed}\n".encode())
        h.update(self.to_jsonl().encode())
        return h.hexdigest()

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_jsonl())

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        if not path.is_file():
            raise ConfigurationError(f"manifest not found: {path}")
        entries = []
        for line in path.read_text().splitlines():
            if line.strip():
                entries.append(ManifestEntry(**json.loads(line)))
        seed = entries[0].seed if entries else 0
        return cls(entries=entries, seed=seed, root=path.parent)

    def referenced_files(self) -> list[Path]:
        out = []
        for e in self.entries:
            out.append(self.resolve(e.clean_path))
            if e.degraded_path:
                out.append(self.resolve(e.degraded_path))
            if "mask" in e.label:
                out.append(self.resolve(e.label["mask"]))
        return out

    def validate(self) -> None:
        """Check every referenced file exists and every clean image decodes."""
        for p in self.referenced_files():
            if not p.is_file():
                raise FileNotFoundError(f"manifest entry references missing file: {p}")
        for e in self.entries:
            with Image.open(self.resolve(e.clean_path)) as im:
                if im.convert("RGB").size[0] == 0:
                    raise ValueError(f"empty image: {e.clean_path}")


def list_clean_images(clean_dir: str | Path) -> list[Path]:
    clean_dir = Path(clean_dir)
    if not clean_dir.is_dir():
        raise ConfigurationError(f"clean image directory does not exist: {clean_dir}")
    return sorted(p for p in clean_dir.iterdir() if p.suffix.lower() == ".png")


def build_manifest(
    clean_dir: str | Path, kinds: list[DegradationKind], seed: int
) -> DatasetManifest:
    """One entry per (image, kind) pair, image-major, with per-entry seeds.

    Paths are stored relative to ``clean_dir``'s parent so a manifest saved
    next to the image directory is relocatable.
    """
    clean_dir = Path(clean_dir)
    images = list_clean_images(clean_dir)
    if not images:
        raise ConfigurationError(f"no PNG images in {clean_dir}")
    if not kinds:
        raise ConfigurationError("at least one degradation kind is required")
    labels = {}
    labels_path = clean_dir / LABELS_FILE
    if labels_path.is_file():
        labels = json.loads(labels_path.read_text())

    entries = []
    for i, img in enumerate(images):
        label = dict(labels.get(img.name, {}))
        if "mask" in label:
            label["mask"] = f"{clean_dir.name}/{label['mask']}"
        for j, kind in enumerate(kinds):
            entries.append(
                ManifestEntry(
                    clean_path=f"{clean_dir.name}/{img.name}",
                    kind=kind.name,
                    severity=kind.severity,
                    seed=derive_seed(seed, i, j),
                    label=label,
                )
            )
    return DatasetManifest(entries=entries, seed=seed, root=clean_dir.parent)


def write_toy_scenes(out_dir: str | Path, n: int, seed: int, size: int = 64) -> Path:
    """Write ``n`` toy scenes as PNGs plus masks and a labels file."""
    out_dir = Path(out_dir)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    labels = {}
    for i, scene in enumerate(generate_scenes(n, seed, size)):
        name = f"scene_{i:05d}.png"
        write_rgb(out_dir / name, torch.from_numpy(scene.image).permute(2, 0, 1))
        Image.fromarray(scene.mask, mode="L").save(out_dir / "masks" / name, format="PNG")
        labels[name] = {"class_id": scene.class_id, "mask": f"masks/{name}"}
    (out_dir / LABELS_FILE).write_text(json.dumps(labels, indent=1, sort_keys=True) + "\n")
    return out_dir


@dataclass
class TaskData:
    """A degraded/clean image set with optional labels, held in memory."""

    degraded: torch.Tensor  # (N, 3, H, W)
    clean: torch.Tensor  # (N, 3, H, W)
    class_ids: torch.Tensor | None = None  # (N,)
    masks: torch.Tensor | None = None  # (N, H, W)
    kinds: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return self.degraded.shape[0]

    def subset(self, idx) -> "TaskData":
        idx = torch.as_tensor(idx, dtype=torch.long)
        return TaskData(
            degraded=self.degraded[idx],
            clean=self.clean[idx],
            class_ids=None if self.class_ids is None else self.class_ids[idx],
            masks=None if self.masks is None else self.masks[idx],
            kinds=[self.kinds[i] for i in idx.tolist()] if self.kinds else [],
        )


def scenes_to_clean(scenes: list[Scene]) -> torch.Tensor:
    arr = np.stack([s.image for s in scenes]).astype(np.float32)
    return quantize8(torch.from_numpy(arr).permute(0, 3, 1, 2))


def toy_task_data(
    scenes: list[Scene], kinds: list[DegradationKind], seed: int
) -> TaskData:
    """Degrade every scene with every kind (image-major), fully in memory."""
    clean = scenes_to_clean(scenes)
    degraded, cleans, cls, masks, names = [], [], [], [], []
    for i, s in enumerate(scenes):
        for j, k in enumerate(kinds):
            degraded.append(quantize8(apply_degradation(clean[i], k, derive_seed(seed, i, j))))
            cleans.append(clean[i])
            cls.append(s.class_id)
            masks.append(torch.from_numpy(s.mask.astype(np.int64)))
            names.append(str(k))
    return TaskData(
        degraded=torch.stack(degraded),
        clean=torch.stack(cleans),
        class_ids=torch.tensor(cls, dtype=torch.long),
        masks=torch.stack(masks),
        kinds=names,
    )


def load_task_data(manifest: DatasetManifest) -> TaskData:
    """Materialize a manifest: read clean images and labels, read or regenerate degraded ones."""
    degraded, clean, cls, masks, names = [], [], [], [], []
    cache: dict[str, torch.Tensor] = {}
    for e in manifest.entries:
        if e.clean_path not in cache:
            cache[e.clean_path] = read_rgb(manifest.resolve(e.clean_path))
        c = cache[e.clean_path]
        if e.degraded_path:
            d = read_rgb(manifest.resolve(e.degraded_path))
        else:
            d = quantize8(apply_degradation(c, e.degradation, e.seed))
        degraded.append(d)
        clean.append(c)
        names.append(f"{e.kind}:{e.severity}")
        if "class_id" in e.label:
            cls.append(int(e.label["class_id"]))
        if "mask" in e.label:
            masks.append(read_mask(manifest.resolve(e.label["mask"])))
    n = len(manifest.entries)
    return TaskData(
        degraded=torch.stack(degraded),
        clean=torch.stack(clean),
        class_ids=torch.tensor(cls, dtype=torch.long) if len(cls) == n else None,
        masks=torch.stack(masks) if len(masks) == n else None,
        kinds=names,
    )
