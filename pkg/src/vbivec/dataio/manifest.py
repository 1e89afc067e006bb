"""Dataset manifests: one ``<segment_id>\\t<feature_path>[\\t<posterior_path>]`` line per segment."""

from __future__ import annotations

import os
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

from vbivec.dataio.formats import read_features, read_posteriors
from vbivec.errors import DimensionMismatchError, ManifestError, RecipeMismatchError
from vbivec.parallel import map_segments
from vbivec.state import RawPosteriors, SegmentFeatures

DIMS_PREFIX = "#dims"


@dataclass(frozen=True)
class ManifestEntry:
    segment_id: str
    feature_path: Path
    posterior_path: Path | None = None


@dataclass
class Manifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    dim: int | None = None
    num_components: int | None = None

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def has_posteriors(self) -> bool:
        return bool(self.entries) and all(e.posterior_path is not None for e in self.entries)

    def validate(self, check_files: bool = True) -> None:
        seen: set[str] = set()
        for entry in self.entries:
            if entry.segment_id in seen:
                raise ManifestError(f"duplicate segment id {entry.segment_id!r}")
            seen.add(entry.segment_id)
            if not check_files:
                continue
            if not entry.feature_path.is_file():
                raise ManifestError(f"segment {entry.segment_id}: feature file {entry.feature_path} does not exist")
            if entry.posterior_path is not None and not entry.posterior_path.is_file():
                raise ManifestError(f"segment {entry.segment_id}: posterior file {entry.posterior_path} does not exist")


def _parse_dims(line: str, lineno: int) -> tuple[int | None, int | None]:
    dim = num_components = None
    for token in line.split("\t")[1:]:
        key, _, value = token.partition("=")
        try:
            number = int(value)
        except ValueError as e:
            raise ManifestError(f"line {lineno}: bad dims entry {token!r}") from e
        if key == "D":
            dim = number
        elif key == "N":
            num_components = number
        else:
            raise ManifestError(f"line {lineno}: unknown dims key {key!r}")
    return dim, num_components


def read_manifest(path: Path, check_files: bool = True) -> Manifest:
    """Parse a manifest; relative paths resolve against the manifest's directory."""
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    base = path.parent
    manifest = Manifest()
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.rstrip("\r")
        if not line.strip():
            continue
        if line.startswith(DIMS_PREFIX):
            manifest.dim, manifest.num_components = _parse_dims(line, lineno)
            continue
        if line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) not in (2, 3) or not all(cols):
            raise ManifestError(f"line {lineno}: expected 2 or 3 tab-separated columns, got {len(cols)}")
        posterior = base / cols[2] if len(cols) == 3 else None
        manifest.entries.append(ManifestEntry(cols[0], base / cols[1], posterior))
    manifest.validate(check_files)
    return manifest


def write_manifest(path: Path, manifest: Manifest) -> None:
    """Write a manifest, storing paths relative to its directory where possible."""
    path = Path(path)
    base = path.parent.resolve()

    def rel(p: Path) -> str:
        try:
            return os.path.relpath(Path(p).resolve(), base)
        except ValueError:
            return str(Path(p).resolve())

    lines = []
    if manifest.dim is not None or manifest.num_components is not None:
        dims = [DIMS_PREFIX]
        if manifest.dim is not None:
            dims.append(f"D={manifest.dim}")
        if manifest.num_components is not None:
            dims.append(f"N={manifest.num_components}")
        lines.append("\t".join(dims))
    for entry in manifest.entries:
        # read_manifest skips "#" lines and splits on tabs
        sid = entry.segment_id
        if not sid or sid.startswith("#") or any(c in sid for c in "\t\r\n"):
            raise ManifestError(f"segment id {sid!r} cannot be stored in a manifest")
        cols = [sid, rel(entry.feature_path)]
        if entry.posterior_path is not None:
            cols.append(rel(entry.posterior_path))
        lines.append("\t".join(cols))
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def load_segments(manifest: Manifest, threads: int = 1) -> list[SegmentFeatures]:
    segs = map_segments(lambda e: read_features(e.feature_path, e.segment_id), manifest.entries, threads)
    dims = {seg.dim for seg in segs}
    if manifest.dim is not None:
        dims.add(manifest.dim)
    if len(dims) > 1:
        raise DimensionMismatchError(f"feature files disagree on D: {sorted(dims)}")
    return segs


def load_posteriors(
    manifest: Manifest,
    floor: float = 1e-10,
    threads: int = 1,
    segs: Sequence[SegmentFeatures] | None = None,
) -> list[RawPosteriors]:
    """Raw posteriors for every entry; every entry must carry a posterior column."""
    for entry in manifest.entries:
        if entry.posterior_path is None:
            raise RecipeMismatchError(f"segment {entry.segment_id}: manifest has no posterior column")
    raws = map_segments(lambda e: read_posteriors(e.posterior_path, e.segment_id, floor), manifest.entries, threads)
    widths = {raw.num_components for raw in raws}
    if manifest.num_components is not None:
        widths.add(manifest.num_components)
    if len(widths) > 1:
        raise DimensionMismatchError(f"posterior files disagree on N: {sorted(widths)}")
    if segs is not None:
        for seg, raw in zip(segs, raws):
            if seg.num_frames != raw.num_frames:
                raise DimensionMismatchError(
                    f"segment {seg.segment_id}: {seg.num_frames} feature frames vs {raw.num_frames} posterior frames"
                )
    return raws
