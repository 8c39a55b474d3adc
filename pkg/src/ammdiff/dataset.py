"""Multimodal slice datasets: synthetic phantoms, on-disk records, splits and masking.

Records live one directory per subject. Each slice stores M raw little-endian
float32 rasters plus a JSON header; phantom slices also carry a latent-anatomy
sidecar so tests can reason about ground truth.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path
from typing import Sequence

import numpy as np

DEFAULT_MODALITIES = ("FLAIR", "T1", "T1CE", "T2")
INDEX_FILE = "index.json"
BLANK_VALUE = 0.0


class DatasetError(Exception):
    """Raised for malformed datasets, bad indices and invalid masks."""


@dataclass
class MultimodalSample:
    images: np.ndarray  # (M, H, W) float32 in [0, 1]
    subject_id: str
    slice_index: int = 0

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        if self.images.ndim != 3:
            raise DatasetError(f"images must be M x H x W, got shape {self.images.shape}")
        if not np.all(np.isfinite(self.images)):
            raise DatasetError("images contain non-finite values")
        if self.images.min() < 0.0 or self.images.max() > 1.0:
            raise DatasetError("intensities must lie in [0, 1]")
        _, h, w = self.images.shape
        if h % 2 or w % 2:
            raise DatasetError(f"height and width must be even, got {h}x{w}")
        if self.slice_index < 0:
            raise DatasetError("slice_index must be >= 0")

    @property
    def n_modalities(self) -> int:
        return self.images.shape[0]


@dataclass(frozen=True)
class PatchMaskSpec:
    patch_size: int = 16
    mask_ratio: float = 0.5

    def __post_init__(self):
        if self.patch_size < 1:
            raise DatasetError("patch_size must be >= 1")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise DatasetError("mask_ratio must lie in [0, 1]")


@dataclass(frozen=True)
class PhantomSpec:
    root_path: str
    n_subjects: int = 64
    height: int = 64
    width: int = 64
    seed: int = 0
    lesion_probability: float = 0.7
    slices_per_subject: int = 1
    modality_names: tuple = DEFAULT_MODALITIES

    def validate(self):
        if self.n_subjects < 1:
            raise DatasetError("n_subjects must be >= 1")
        if self.height < 2 or self.width < 2 or self.height % 2 or self.width % 2:
            raise DatasetError("height and width must be even and >= 2")
        if not 0.0 <= self.lesion_probability <= 1.0:
            raise DatasetError("lesion_probability must lie in [0, 1]")
        if self.slices_per_subject < 1:
            raise DatasetError("slices_per_subject must be >= 1")
        if tuple(self.modality_names) != DEFAULT_MODALITIES:
            raise DatasetError("phantoms only synthesize the FLAIR/T1/T1CE/T2 set")


@dataclass
class DatasetHandle:
    root_path: Path
    index: list  # of (subject_id, slice_index)
    modality_names: list = field(default_factory=lambda: list(DEFAULT_MODALITIES))

    def __post_init__(self):
        self.root_path = Path(self.root_path)
        self.index = [(str(s), int(k)) for s, k in self.index]
        if len(set(self.modality_names)) != len(self.modality_names):
            raise DatasetError("duplicate modality names")

    def __len__(self):
        return len(self.index)

    @property
    def n_modalities(self) -> int:
        return len(self.modality_names)

    @property
    def subjects(self) -> list:
        return sorted({s for s, _ in self.index})

    def to_manifest(self) -> dict:
        return {
            "root_path": str(self.root_path),
            "modality_names": list(self.modality_names),
            "index": [[s, k] for s, k in self.index],
        }

    def save_manifest(self, path):
        Path(path).write_text(json.dumps(self.to_manifest(), indent=1) + "\n")

    @classmethod
    def from_manifest(cls, path) -> "DatasetHandle":
        meta = json.loads(Path(path).read_text())
        return cls(Path(meta["root_path"]), [tuple(e) for e in meta["index"]], meta["modality_names"])

    @classmethod
    def open(cls, root) -> "DatasetHandle":
        """Open a dataset directory through its top-level index file."""
        root = Path(root)
        index_path = root / INDEX_FILE
        if not index_path.exists():
            raise DatasetError(f"no {INDEX_FILE} under {root}")
        meta = json.loads(index_path.read_text())
        return cls(root, [tuple(e) for e in meta["index"]], meta["modality_names"])


# ---------------------------------------------------------------------------
# record I/O


def _slice_stem(root: Path, subject_id: str, slice_index: int) -> Path:
    return root / subject_id / f"slice_{slice_index:04d}"


def write_record(root, sample: MultimodalSample, modality_names: Sequence[str], latent: dict | None = None):
    """Write one slice: M f32le rasters, a JSON header and an optional latent sidecar."""
    root = Path(root)
    stem = _slice_stem(root, sample.subject_id, sample.slice_index)
    stem.parent.mkdir(parents=True, exist_ok=True)
    m, h, w = sample.images.shape
    if m != len(modality_names):
        raise DatasetError("modality count does not match modality_names")
    for name, channel in zip(modality_names, sample.images):
        Path(f"{stem}_{name}.f32").write_bytes(channel.astype("<f4").tobytes())
    header = {
        "subject_id": sample.subject_id,
        "slice_index": sample.slice_index,
        "modality_names": list(modality_names),
        "height": h,
        "width": w,
        "dtype": "f32le",
    }
    Path(f"{stem}.json").write_text(json.dumps(header, indent=1, sort_keys=True) + "\n")
    if latent is not None:
        Path(f"{stem}.latent.json").write_text(json.dumps(latent, indent=1, sort_keys=True) + "\n")


def read_record(root, subject_id: str, slice_index: int) -> MultimodalSample:
    stem = _slice_stem(Path(root), subject_id, slice_index)
    try:
        header = json.loads(Path(f"{stem}.json").read_text())
        h, w = int(header["height"]), int(header["width"])
        if header.get("dtype") != "f32le":
            raise DatasetError(f"unsupported dtype {header.get('dtype')!r}")
        channels = []
        for name in header["modality_names"]:
            raw = Path(f"{stem}_{name}.f32").read_bytes()
            if len(raw) != 4 * h * w:
                raise DatasetError(f"corrupt record {stem}_{name}.f32: {len(raw)} bytes")
            channels.append(np.frombuffer(raw, dtype="<f4").reshape(h, w))
    except (OSError, ValueError, KeyError) as exc:
        raise DatasetError(f"corrupt or missing record {stem}: {exc}") from exc
    images = np.clip(np.stack(channels).astype(np.float32), 0.0, 1.0)
    return MultimodalSample(images, header["subject_id"], int(header["slice_index"]))


def read_latent(handle: DatasetHandle, i: int) -> dict:
    subject_id, slice_index = handle.index[i]
    stem = _slice_stem(handle.root_path, subject_id, slice_index)
    return json.loads(Path(f"{stem}.latent.json").read_text())


def load_sample(handle: DatasetHandle, i: int) -> MultimodalSample:
    if not 0 <= i < len(handle.index):
        raise IndexError(f"index out of range: {i} (dataset has {len(handle.index)} entries)")
    subject_id, slice_index = handle.index[i]
    sample = read_record(handle.root_path, subject_id, slice_index)
    if sample.n_modalities != handle.n_modalities:
        raise DatasetError(f"record {subject_id}/{slice_index} has {sample.n_modalities} modalities")
    return sample


def load_stack(handle: DatasetHandle) -> np.ndarray:
    """All samples of a handle as one (N, M, H, W) float32 array."""
    return np.stack([load_sample(handle, i).images for i in range(len(handle))])


# ---------------------------------------------------------------------------
# phantom generation

# Tissue classes: background, CSF, grey matter, white matter, lesion core, lesion rim.
# Intensities per modality loosely follow the clinical contrasts.
TISSUE_CONTRAST = {
    "FLAIR": {"csf": 0.10, "gm": 0.55, "wm": 0.45, "core": 0.85, "rim": 0.90, "edema": 0.80},
    "T1": {"csf": 0.15, "gm": 0.50, "wm": 0.75, "core": 0.25, "rim": 0.35, "edema": 0.40},
    "T1CE": {"csf": 0.15, "gm": 0.50, "wm": 0.75, "core": 0.25, "rim": 0.95, "edema": 0.40},
    "T2": {"csf": 0.95, "gm": 0.60, "wm": 0.35, "core": 0.75, "rim": 0.65, "edema": 0.85},
}
# per-modality gamma applied after mixing; makes the cross-modal mapping nonlinear
MODALITY_GAMMA = {"FLAIR": 1.1, "T1": 0.9, "T1CE": 1.0, "T2": 1.2}


def _ellipse(yy, xx, cy, cx, ry, rx, angle):
    c, s = np.cos(angle), np.sin(angle)
    dy, dx = yy - cy, xx - cx
    u = (c * dx + s * dy) / rx
    v = (-s * dx + c * dy) / ry
    return u * u + v * v


def _smooth_field(rng, h, w, n_terms=4):
    """Low-frequency multiplicative bias field around 1."""
    yy, xx = np.mgrid[0:h, 0:w] / np.array([h, w])[:, None, None]
    out = np.zeros((h, w))
    for _ in range(n_terms):
        fy, fx = rng.uniform(0.3, 1.5, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        out += np.cos(2 * np.pi * (fy * yy + fx * xx) + phase)
    return 1.0 + 0.06 * out / n_terms


def _draw_latent(rng, h, w, lesion_probability):
    brain = {
        "cy": float(rng.uniform(0.45, 0.55)),
        "cx": float(rng.uniform(0.45, 0.55)),
        "ry": float(rng.uniform(0.36, 0.43)),
        "rx": float(rng.uniform(0.28, 0.36)),
        "angle": float(rng.uniform(-0.3, 0.3)),
    }
    cortex = float(rng.uniform(0.12, 0.2))  # fractional thickness of grey-matter ring
    ventricles = []
    for side in (-1, 1):
        ventricles.append({
            "cy": brain["cy"] + float(rng.uniform(-0.05, 0.03)),
            "cx": brain["cx"] + side * float(rng.uniform(0.04, 0.08)),
            "ry": float(rng.uniform(0.07, 0.12)),
            "rx": float(rng.uniform(0.025, 0.045)),
            "angle": brain["angle"] + side * float(rng.uniform(0.0, 0.3)),
        })
    lesion = None
    if rng.uniform() < lesion_probability:
        r = float(rng.uniform(0.06, 0.11))
        theta = rng.uniform(0, 2 * np.pi)
        dist = rng.uniform(0.1, 0.5)
        lesion = {
            "cy": brain["cy"] + float(dist * brain["ry"] * np.sin(theta)),
            "cx": brain["cx"] + float(dist * brain["rx"] * np.cos(theta)),
            "r": r,
            "rim": float(rng.uniform(0.25, 0.4)),  # rim thickness as a fraction of r
            "edema": float(rng.uniform(1.4, 1.9)),  # edema radius as a multiple of r
        }
    return {"brain": brain, "cortex": cortex, "ventricles": ventricles, "lesion": lesion,
            "field_seed": int(rng.integers(2**31))}


def _tissue_maps(latent, h, w):
    yy, xx = np.mgrid[0:h, 0:w]
    yy = (yy + 0.5) / h
    xx = (xx + 0.5) / w
    b = latent["brain"]
    d_brain = _ellipse(yy, xx, b["cy"], b["cx"], b["ry"], b["rx"], b["angle"])
    brain = d_brain <= 1.0
    inner = (1.0 - latent["cortex"]) ** 2
    wm = d_brain <= inner
    csf = np.zeros((h, w), bool)
    for v in latent["ventricles"]:
        csf |= _ellipse(yy, xx, v["cy"], v["cx"], v["ry"], v["rx"], v["angle"]) <= 1.0
    # thin CSF rim around the brain
    csf |= (d_brain > 1.0) & (d_brain <= 1.12)
    gm = brain & ~wm
    wm = wm & ~csf
    gm = gm & ~csf
    maps = {"csf": csf, "gm": gm, "wm": wm}
    core = np.zeros((h, w), bool)
    rim = np.zeros((h, w), bool)
    edema = np.zeros((h, w), bool)
    les = latent["lesion"]
    if les is not None:
        d = np.sqrt((yy - les["cy"]) ** 2 + (xx - les["cx"]) ** 2)
        inside = brain & ~csf
        tumour = inside & (d <= les["r"])
        core = tumour & (d <= les["r"] * (1.0 - les["rim"]))
        rim = tumour & ~core
        edema = inside & ~tumour & (d <= les["r"] * les["edema"])
    for key in ("csf", "gm", "wm"):
        maps[key] = maps[key] & ~(core | rim | edema)
    maps.update({"core": core, "rim": rim, "edema": edema})
    return maps


def render_phantom(latent: dict, h: int, w: int, modality_names=DEFAULT_MODALITIES) -> np.ndarray:
    """Render the (M, H, W) stack for one latent anatomy; a pure function of its inputs."""
    maps = _tissue_maps(latent, h, w)
    bias = _smooth_field(np.random.default_rng(latent["field_seed"]), h, w)
    out = np.zeros((len(modality_names), h, w))
    for m, name in enumerate(modality_names):
        img = np.zeros((h, w))
        for tissue, value in TISSUE_CONTRAST[name].items():
            img[maps[tissue]] = value
        img = np.clip(img * bias, 0.0, 1.0) ** MODALITY_GAMMA[name]
        out[m] = img
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def lesion_mask(latent: dict, h: int, w: int, part: str = "tumour") -> np.ndarray:
    """Boolean lesion region from a latent record; `part` is core, rim, edema or tumour."""
    maps = _tissue_maps(latent, h, w)
    if part == "tumour":
        return maps["core"] | maps["rim"]
    return maps[part]


def generate_phantom_dataset(spec: PhantomSpec) -> DatasetHandle:
    """Write a deterministic phantom dataset and return a handle over it.

    Every subject shares one latent anatomy across its modalities; slices of a
    subject jitter the anatomy slightly so they stay correlated.
    """
    spec.validate()
    root = Path(spec.root_path)
    try:
        root.mkdir(parents=True, exist_ok=True)
        probe = root / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise DatasetError(f"cannot write to {root}: {exc}") from exc

    rng = np.random.default_rng(spec.seed)
    index = []
    for s in range(spec.n_subjects):
        subject_id = f"subj_{s:04d}"
        base = _draw_latent(rng, spec.height, spec.width, spec.lesion_probability)
        for k in range(spec.slices_per_subject):
            latent = json.loads(json.dumps(base))
            if k:
                shrink = 1.0 - 0.04 * k
                latent["brain"]["ry"] *= shrink
                latent["brain"]["rx"] *= shrink
                latent["field_seed"] = base["field_seed"] + k
            images = render_phantom(latent, spec.height, spec.width, spec.modality_names)
            sample = MultimodalSample(images, subject_id, k)
            write_record(root, sample, spec.modality_names, latent)
            index.append((subject_id, k))

    handle = DatasetHandle(root, index, list(spec.modality_names))
    meta = handle.to_manifest()
    meta.pop("root_path")
    meta["phantom_spec"] = {
        "n_subjects": spec.n_subjects, "height": spec.height, "width": spec.width,
        "seed": spec.seed, "lesion_probability": spec.lesion_probability,
        "slices_per_subject": spec.slices_per_subject,
    }
    (root / INDEX_FILE).write_text(json.dumps(meta, indent=1) + "\n")
    return handle


def import_nifti(paths: dict, root, subject_id: str, height: int | None = None, width: int | None = None) -> DatasetHandle:
    """Import co-registered NIfTI volumes of one subject as axial slices.

    `paths` maps modality name to a volume file. Each volume is min-max
    normalised over its nonzero voxels; slices are taken along axis 2 and
    optionally resized.
    """
    import nibabel as nib  # optional dependency

    root = Path(root)
    names = list(paths)
    vols = []
    for name in names:
        vol = np.asarray(nib.load(str(paths[name])).get_fdata(), dtype=np.float64)
        nz = vol[vol != 0]
        if nz.size:
            lo, hi = nz.min(), nz.max()
            vol = np.where(vol != 0, (vol - lo) / max(hi - lo, 1e-12), 0.0)
        vols.append(np.clip(vol, 0.0, 1.0))
    shapes = {v.shape for v in vols}
    if len(shapes) != 1:
        raise DatasetError(f"volumes are not co-registered: shapes {shapes}")
    stack = np.stack(vols)  # M, X, Y, Z
    if height is not None and width is not None:
        from scipy.ndimage import zoom

        sx, sy = height / stack.shape[1], width / stack.shape[2]
        stack = np.clip(zoom(stack, (1, sx, sy, 1), order=1), 0.0, 1.0)
    index = []
    for k in range(stack.shape[3]):
        images = stack[:, :, :, k].astype(np.float32)
        write_record(root, MultimodalSample(images, subject_id, k), names)
        index.append((subject_id, k))
    index_path = root / INDEX_FILE
    if index_path.exists():
        meta = json.loads(index_path.read_text())
        if meta["modality_names"] != names:
            raise DatasetError("modality names differ from the existing dataset")
        kept = [tuple(e) for e in meta["index"] if e[0] != subject_id]
        index = kept + index
    (root / INDEX_FILE).write_text(json.dumps({"modality_names": names, "index": [list(e) for e in index]}, indent=1) + "\n")
    return DatasetHandle(root, index, names)


# ---------------------------------------------------------------------------
# splitting


def split_dataset(handle: DatasetHandle, ratios=(0.6, 0.2, 0.2), seed: int = 0):
    """Subject-level train/val/test split.

    Counts are floor(ratio * n) with leftover subjects handed out by largest
    remainder, so 10 subjects at 60/20/20 give exactly 6/2/2.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise DatasetError(f"ratios must be three positive numbers summing to 1, got {ratios}")
    subjects = handle.subjects
    n = len(subjects)
    raw = np.array(ratios) * n
    counts = np.floor(raw).astype(int)
    for k in np.argsort(-(raw - counts), kind="stable")[: n - counts.sum()]:
        counts[k] += 1
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [subjects[i] for i in order]
    bounds = np.cumsum(counts)
    groups = [set(shuffled[:bounds[0]]), set(shuffled[bounds[0]:bounds[1]]), set(shuffled[bounds[1]:])]
    return tuple(
        DatasetHandle(handle.root_path, [e for e in handle.index if e[0] in g], list(handle.modality_names))
        for g in groups
    )


# ---------------------------------------------------------------------------
# presence masks


def all_presence_masks(m: int = 4, include_full: bool = False) -> list:
    """Every mask with at least one present entry, in a fixed order.

    Masks are ordered by bit pattern with modality 0 as the most significant bit.
    Full presence is excluded unless `include_full`.
    """
    masks = []
    for bits in product((False, True), repeat=m):
        if not any(bits):
            continue
        if all(bits) and not include_full:
            continue
        masks.append(np.array(bits, dtype=bool))
    return masks


def leave_one_out_masks(m: int = 4) -> list:
    masks = []
    for k in range(m):
        mask = np.ones(m, dtype=bool)
        mask[k] = False
        masks.append(mask)
    return masks


def sample_presence_mask(rng: np.random.Generator, m: int = 4, policy: str = "uniform_proper_subsets") -> np.ndarray:
    """Uniform draw over the 2**m - 2 masks with something present and something missing."""
    if m < 2:
        raise DatasetError("need at least two modalities to sample a presence mask")
    if policy != "uniform_proper_subsets":
        raise DatasetError(f"unknown presence policy {policy!r}")
    code = int(rng.integers(1, 2**m - 1))
    return np.array([(code >> (m - 1 - k)) & 1 for k in range(m)], dtype=bool)


def parse_presence(spec: str, m: int = 4) -> np.ndarray:
    """Parse a presence string such as "1,0,0,1"."""
    try:
        bits = [int(tok) for tok in spec.replace(" ", "").split(",")]
    except ValueError:
        raise DatasetError(f"malformed presence spec {spec!r}") from None
    if len(bits) != m or any(b not in (0, 1) for b in bits):
        raise DatasetError(f"malformed presence spec {spec!r}: expected {m} comma-separated 0/1 values")
    mask = np.array(bits, dtype=bool)
    if not mask.any():
        raise DatasetError("at least one modality required")
    return mask


def mask_to_str(mask) -> str:
    return "".join("1" if b else "0" for b in np.asarray(mask, dtype=bool))


def validate_mask(mask, m: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (m,):
        raise DatasetError(f"presence mask must have length {m}, got shape {mask.shape}")
    if not mask.any():
        raise DatasetError("at least one modality required")
    return mask


def apply_presence(images, mask, blank_value: float = BLANK_VALUE) -> np.ndarray:
    """Replace missing channels of an (M, H, W) stack (or a sample) with a constant."""
    if isinstance(images, MultimodalSample):
        images = images.images
    images = np.asarray(images)
    mask = validate_mask(mask, images.shape[0])
    out = images.copy()
    out[~mask] = blank_value
    return out


# ---------------------------------------------------------------------------
# patch masking


def patch_mask(stack, spec: PatchMaskSpec, rng: np.random.Generator):
    """Zero a random subset of square patches across all channels at once.

    Returns the masked stack and the boolean (H/p, W/p) patch map.
    """
    stack = np.asarray(stack)
    h, w = stack.shape[-2:]
    p = spec.patch_size
    if h % p or w % p:
        raise DatasetError(f"patch_size {p} does not divide image size {h}x{w}")
    gh, gw = h // p, w // p
    n_patches = gh * gw
    n_masked = int(np.floor(spec.mask_ratio * n_patches + 0.5))
    chosen = rng.choice(n_patches, size=n_masked, replace=False)
    patch_map = np.zeros(n_patches, dtype=bool)
    patch_map[chosen] = True
    patch_map = patch_map.reshape(gh, gw)
    pixel_map = np.kron(patch_map, np.ones((p, p), dtype=bool)).astype(bool)
    masked = stack.copy()
    masked[..., pixel_map] = 0.0
    return masked, patch_map


def ensure_writable_dir(path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    if not os.access(path, os.W_OK):
        raise DatasetError(f"cannot write to {path}")
    return path
