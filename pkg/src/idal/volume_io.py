"""NIfTI volumes, brain masks, multi-modal cases and dataset manifests."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import nibabel as nib
import numpy as np

MODALITIES = ("t1", "t2", "dwi", "flair")
SCHEMA_VERSION = 1


class VolumeIOError(Exception):
    def __init__(self, path, msg):
        self.path = str(path)
        super().__init__(f"{path}: {msg}")


class MissingFileError(VolumeIOError, FileNotFoundError):
    pass


class HeaderError(VolumeIOError):
    pass


class UnsupportedDatatypeError(VolumeIOError):
    pass


class CaseError(ValueError):
    """A case violates a geometry or label-consistency invariant."""


@dataclass(frozen=True)
class Volume:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    affine: np.ndarray | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"volume must be 3-D with positive dims, got {self.data.shape}")
        sp = tuple(float(s) for s in self.spacing)
        if len(sp) != 3 or min(sp) <= 0:
            raise ValueError(f"spacing must be 3 positive values, got {self.spacing}")
        object.__setattr__(self, "spacing", sp)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    def same_geometry(self, other: "Volume") -> bool:
        return self.dims == other.dims and np.allclose(self.spacing, other.spacing)

    def with_data(self, data: np.ndarray) -> "Volume":
        return type(self)(data, self.spacing, self.affine)


class BrainMask(Volume):
    def __post_init__(self):
        super().__post_init__()
        if self.data.dtype != bool:
            object.__setattr__(self, "data", self.data.astype(bool))


@dataclass(frozen=True)
class MultiModalCase:
    case_id: str
    t1: Volume
    t2: Volume
    dwi: Volume
    flair: Volume
    brain_mask: BrainMask
    gt_mask: Volume | None = None
    sur_mask: Volume | None = None
    csf_scribbles: Volume | None = None
    # set by preprocess.normalize_case
    normalization: Any = None

    def modality(self, name: str) -> Volume:
        return getattr(self, name)

    def stacked(self) -> np.ndarray:
        """(4, X, Y, Z) array in MODALITIES order."""
        return np.stack([self.modality(m).data for m in MODALITIES])

    def validate(self) -> None:
        ref = self.t1
        for name in ("t2", "dwi", "flair", "brain_mask", "gt_mask", "sur_mask", "csf_scribbles"):
            v = getattr(self, name)
            if v is not None and not v.same_geometry(ref):
                raise CaseError(f"{self.case_id}: {name} geometry {v.dims}/{v.spacing} != t1 {ref.dims}/{ref.spacing}")
        brain = self.brain_mask.data
        if self.gt_mask is not None and not np.isin(self.gt_mask.data, (0, 1)).all():
            raise CaseError(f"{self.case_id}: gt mask is not binary")
        for name in ("sur_mask", "csf_scribbles"):
            v = getattr(self, name)
            if v is None:
                continue
            if not np.isin(v.data, (0, 1, 2)).all():
                raise CaseError(f"{self.case_id}: {name} has labels outside 0/1/2")
            if ((v.data > 0) & ~brain).any():
                raise CaseError(f"{self.case_id}: {name} labels voxels outside the brain mask")
        if self.sur_mask is not None and self.gt_mask is not None:
            sur, gt = self.sur_mask.data, self.gt_mask.data
            if ((sur == 2) & (gt != 1)).any() or ((sur == 1) & (gt != 0)).any():
                raise CaseError(f"{self.case_id}: SUR labels contradict the ground truth")


def _float_data(img, path) -> np.ndarray:
    dtype = img.get_data_dtype()
    if dtype.fields is not None or dtype.kind not in "biuf":
        raise UnsupportedDatatypeError(path, f"unsupported datatype {dtype}")
    try:
        data = np.asanyarray(img.dataobj)
    except Exception as exc:  # nibabel raises plain OSError/ValueError on short reads
        raise HeaderError(path, f"cannot read voxel data ({exc})") from exc
    if data.ndim == 4 and data.shape[3] == 1:
        data = data[..., 0]
    if data.ndim != 3:
        raise HeaderError(path, f"expected a 3-D volume, got shape {data.shape}")
    return np.asarray(data, dtype=np.float64)


def read_volume(path: str | Path) -> Volume:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(path, "no such file")
    try:
        img = nib.load(str(path))
    except Exception as exc:
        raise HeaderError(path, f"malformed NIfTI header ({exc})") from exc
    if not isinstance(img, nib.Nifti1Image):
        raise HeaderError(path, f"not a NIfTI-1 image ({type(img).__name__})")
    data = _float_data(img, path)
    spacing = tuple(float(z) for z in img.header.get_zooms()[:3])
    return Volume(data, spacing, np.asarray(img.affine))


def _affine(v: Volume) -> np.ndarray:
    return v.affine if v.affine is not None else np.diag([*v.spacing, 1.0])


def write_volume(v: Volume, path: str | Path, dtype=np.float32) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        img = nib.Nifti1Image(np.asarray(v.data, dtype=dtype), _affine(v))
        img.header.set_zooms(v.spacing)
        img.header.set_data_dtype(dtype)
        nib.save(img, str(path))
    except OSError as exc:
        raise VolumeIOError(path, f"cannot write ({exc})") from exc


def write_mask(mask: Volume, path: str | Path, reference: Volume) -> None:
    if not mask.same_geometry(reference):
        raise CaseError(f"mask geometry {mask.dims} does not match reference {reference.dims}")
    write_volume(Volume(np.asarray(mask.data, dtype=np.uint8), reference.spacing, reference.affine), path, np.uint8)


def compute_brain_mask(t1: Volume, t2: Volume) -> BrainMask:
    """Brain = voxels where neither T1 nor T2 is zero."""
    if not t1.same_geometry(t2):
        raise CaseError(f"t1 {t1.dims} and t2 {t2.dims} geometry differ")
    return BrainMask((t1.data != 0) & (t2.data != 0), t1.spacing, t1.affine)


# --------------------------------------------------------------------------
# manifests


@dataclass
class ManifestEntry:
    case_id: str
    paths: dict[str, Path]  # modality/gt/sur/csf -> absolute path

    def to_json(self, base: Path) -> dict:
        out = {"id": self.case_id}
        for k, p in self.paths.items():
            try:
                out[k] = str(Path(p).relative_to(base))
            except ValueError:
                out[k] = str(p)
        return out


@dataclass
class DatasetManifest:
    cases: list[ManifestEntry]
    schema_version: int = SCHEMA_VERSION
    base_dir: Path = Path(".")

    def ids(self) -> list[str]:
        return [c.case_id for c in self.cases]

    def entry(self, case_id: str) -> ManifestEntry:
        for c in self.cases:
            if c.case_id == case_id:
                return c
        raise KeyError(case_id)


def read_manifest(path: str | Path, check_paths: bool = True) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(path, "no such manifest")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise HeaderError(path, f"invalid JSON ({exc})") from exc
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise HeaderError(path, f"unsupported schema_version {doc.get('schema_version')!r}")
    base = path.parent.resolve()
    entries, seen = [], set()
    for raw in doc.get("cases", []):
        cid = str(raw.get("id", ""))
        if not cid:
            raise HeaderError(path, "case entry without id")
        if cid in seen:
            raise HeaderError(path, f"duplicate case id {cid}")
        seen.add(cid)
        paths = {}
        for key in (*MODALITIES, "gt", "sur", "csf"):
            if key in raw and raw[key] is not None:
                p = Path(raw[key])
                paths[key] = p if p.is_absolute() else base / p
            elif key in MODALITIES:
                raise HeaderError(path, f"case {cid} lacks {key}")
        if check_paths:
            for key, p in paths.items():
                if not p.is_file():
                    raise MissingFileError(p, f"referenced by case {cid} ({key})")
        entries.append(ManifestEntry(cid, paths))
    return DatasetManifest(entries, SCHEMA_VERSION, base)


def write_manifest(m: DatasetManifest, path: str | Path) -> None:
    path = Path(path)
    base = path.parent.resolve()
    doc = {"schema_version": m.schema_version, "cases": [c.to_json(base) for c in m.cases]}
    path.write_text(json.dumps(doc, indent=2))


def load_case(entry: ManifestEntry) -> MultiModalCase:
    vols = {k: read_volume(entry.paths[k]) for k in MODALITIES}
    ref = vols["t1"]
    for k, v in vols.items():
        if not v.same_geometry(ref):
            raise CaseError(f"{entry.case_id}: {k} geometry {v.dims}/{v.spacing} != t1 {ref.dims}/{ref.spacing}")
    optional = {}
    for key, name in (("gt", "gt_mask"), ("sur", "sur_mask"), ("csf", "csf_scribbles")):
        if key in entry.paths:
            v = read_volume(entry.paths[key])
            optional[name] = v.with_data(np.rint(v.data).astype(np.uint8))
    case = MultiModalCase(
        entry.case_id,
        brain_mask=compute_brain_mask(vols["t1"], vols["t2"]),
        **vols,
        **optional,
    )
    case.validate()
    return case


def load_dataset(manifest: DatasetManifest) -> list[MultiModalCase]:
    return [load_case(e) for e in manifest.cases]

