"""Dataset directories: ``items/<index>/frame_<f>.png``, ``mask_<subject>_<f>.png``, ``meta.json``."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
from PIL import Image

from ..textcond import parse_prompt
from .corpus import CorpusItem, to_uint8
from .render import SceneSpec, render_video


def save_png(path: Path, arr: np.ndarray) -> None:
    """Write a [3, H, W] float image in [-1, 1] or an [H, W] bool mask."""
    if arr.dtype == bool:
        img = Image.fromarray((arr * 255).astype(np.uint8), mode="L")
    else:
        img = Image.fromarray(to_uint8(arr).transpose(1, 2, 0), mode="RGB")
    # no timestamps or other ancillary chunks, so bytes depend only on pixels
    img.save(path, format="PNG", optimize=False)


def load_png(path: Path) -> np.ndarray:
    return np.asarray(Image.open(path)).copy()


def write_dataset(items: list[CorpusItem], out: str | Path, seed: int, extra_meta: dict | None = None) -> dict:
    out = Path(out)
    (out / "items").mkdir(parents=True, exist_ok=True)
    counts = {"image": 0, "video": 0}
    for it in items:
        d = out / "items" / str(it.index)
        d.mkdir(parents=True, exist_ok=True)
        frames, masks = render_video(it.scene)
        keep = [it.frame] if it.kind == "image" else range(it.scene.frames)
        for k, f in enumerate(keep):
            save_png(d / f"frame_{k}.png", frames[f])
            for i in range(masks.shape[1]):
                save_png(d / f"mask_{i}_{k}.png", masks[f, i])
        meta = dict(it.to_json(), seed=seed)
        (d / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1))
        counts[it.kind] += 1
    manifest = {"items": len(items), "images": counts["image"], "videos": counts["video"], "seed": seed}
    manifest.update(extra_meta or {})
    manifest["content_hash"] = dataset_hash(out)
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))
    return manifest


def dataset_hash(root: str | Path) -> str:
    h = hashlib.sha256()
    for p in sorted((Path(root) / "items").rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def read_dataset(root: str | Path) -> tuple[list[CorpusItem], dict[str, np.ndarray]]:
    """Items plus uint8 pixel arrays in the layout produced by ``render_corpus``."""
    root = Path(root)
    if not (root / "manifest.json").exists():
        raise FileNotFoundError(f"no dataset manifest in {root}")
    dirs = sorted((root / "items").iterdir(), key=lambda p: int(p.name))
    items, imgs, vids = [], [], []
    for d in dirs:
        meta = json.loads((d / "meta.json").read_text())
        scene = SceneSpec.from_json(meta["scene"])
        it = CorpusItem(meta["index"], meta["kind"], scene, parse_prompt(meta["caption"]),
                        [tuple(b) for b in meta["boxes"]], meta["frame"])
        n = 1 if it.kind == "image" else scene.frames
        frames = np.stack([load_png(d / f"frame_{k}.png").transpose(2, 0, 1) for k in range(n)])
        items.append(it)
        (imgs if it.kind == "image" else vids).append(frames[0] if it.kind == "image" else frames)
    out = {}
    if imgs:
        out["images"] = np.stack(imgs)
    if vids:
        out["videos"] = np.stack(vids)
    return items, out
