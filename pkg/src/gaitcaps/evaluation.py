"""Gallery/probe protocols, cross-view rank-1 matrices and embedding export."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import model
from .data import DatasetIndex, GaitSequence

PROTOCOLS = ("casia-b", "ou-mvlp", "synthetic")

CASIA_GALLERY = {"NM": (1, 2, 3, 4)}
CASIA_PROBES = {"NM": (5, 6), "BG": (1, 2), "CL": (1, 2)}


class ProtocolError(ValueError):
    pass


@dataclass
class ProtocolSplit:
    kind: str
    gallery: List[GaitSequence]
    probes: Dict[str, List[GaitSequence]]
    views: List[int]

    def all_sequences(self) -> List[GaitSequence]:
        seqs = list(self.gallery)
        for group in self.probes.values():
            seqs.extend(group)
        return sorted(seqs, key=lambda s: s.key)


def build_protocol(index: DatasetIndex, kind: str = "casia-b") -> ProtocolSplit:
    """Gallery and per-condition probe sets over every identity in ``index``.

    ``index`` should hold only test identities. ``casia-b``: gallery NM 1-4,
    probes NM 5-6 / BG 1-2 / CL 1-2. ``ou-mvlp``: gallery session 01, probe
    session 00. ``synthetic``: gallery is the first half of each subject's NM
    sequences per view, every other sequence is a probe.
    """
    if kind not in PROTOCOLS:
        raise ValueError(f"unknown protocol {kind!r}; expected one of {PROTOCOLS}")
    views = index.views
    have = {s.key: s for s in index.sequences}
    if kind == "casia-b":
        return _fixed_split(kind, index, have, views, CASIA_GALLERY, CASIA_PROBES)
    if kind == "ou-mvlp":
        return _fixed_split(kind, index, have, views, {"01": (1,)}, {"00": (0,)})

    gallery: List[GaitSequence] = []
    probes: Dict[str, List[GaitSequence]] = {}
    for ident, seqs in index.by_identity().items():
        for view in views:
            at_view = [s for s in seqs if s.view == view]
            nm = sorted((s for s in at_view if s.condition == "NM"), key=lambda s: s.seq_index)
            if len(nm) < 2:
                raise ProtocolError(f"identity {ident} view {view}: need >= 2 NM sequences, have {len(nm)}")
            half = len(nm) // 2
            gallery.extend(nm[:half])
            for s in nm[half:] + [s for s in at_view if s.condition != "NM"]:
                probes.setdefault(s.condition, []).append(s)
    order = ["NM", "BG", "CL"]
    probes = {c: sorted(probes[c], key=lambda s: s.key)
              for c in sorted(probes, key=lambda c: (order.index(c) if c in order else 9, c))}
    return ProtocolSplit(kind, sorted(gallery, key=lambda s: s.key), probes, views)


def _fixed_split(kind, index, have, views, gallery_spec, probe_spec) -> ProtocolSplit:
    missing = []

    def collect(spec):
        out = {}
        for cond, nums in spec.items():
            group = []
            for ident in index.identities:
                for num in nums:
                    for view in views:
                        key = (ident, cond, num, view)
                        if key in have:
                            group.append(have[key])
                        else:
                            missing.append(_key_name(kind, key))
            out[cond] = group
        return out

    gallery = [s for g in collect(gallery_spec).values() for s in g]
    probes = collect(probe_spec)
    if missing:
        shown = ", ".join(missing[:20]) + (" ..." if len(missing) > 20 else "")
        raise ProtocolError(f"{len(missing)} required sequences missing: {shown}")
    return ProtocolSplit(kind, sorted(gallery, key=lambda s: s.key), probes, views)


def _key_name(kind, key) -> str:
    ident, cond, num, view = key
    if kind == "casia-b":
        return f"{ident}/{cond.lower()}-{num:02d}/{view:03d}"
    return f"{ident}/{cond}/{view:03d}"


# ---------------------------------------------------------------------------
# embeddings
# ---------------------------------------------------------------------------

def embed(seq: GaitSequence, ckpt) -> np.ndarray:
    """Test-time feature: flattened digit capsules over all frames."""
    frames = np.asarray(seq.frames, dtype=np.float64)
    return model.embed_frames(ckpt.params, ckpt.config, frames)


def embed_all(seqs: Sequence[GaitSequence], ckpt) -> np.ndarray:
    if not seqs:
        return np.zeros((0, model.embedding_dim(ckpt.config)))
    return np.stack([embed(s, ckpt) for s in seqs])


# ---------------------------------------------------------------------------
# rank-1
# ---------------------------------------------------------------------------

@dataclass
class ConditionReport:
    views: List[int]
    matrix: np.ndarray  # (probe view, gallery view) percentages; NaN = excluded/absent
    view_means: np.ndarray
    mean: float

    def included(self) -> np.ndarray:
        return ~np.isnan(self.matrix)


def nearest_gallery(probe: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    """Index of the Euclidean-nearest gallery row for each probe row (first on ties)."""
    d = ((probe[:, None, :] - gallery[None, :, :]) ** 2).sum(-1)
    return d.argmin(axis=1)


def rank1_matrix(gallery_emb: np.ndarray, gallery_ids: Sequence, gallery_views: Sequence[int],
                 probe_emb: np.ndarray, probe_ids: Sequence, probe_views: Sequence[int],
                 views: Sequence[int]) -> np.ndarray:
    """Cross-view rank-1 percentages, rows = probe view, cols = gallery view.

    Identical-view cells and cells without probes are NaN.
    """
    gallery_ids = np.asarray(gallery_ids)
    probe_ids = np.asarray(probe_ids)
    gv = np.asarray(gallery_views)
    pv = np.asarray(probe_views)
    n = len(views)
    mat = np.full((n, n), np.nan)
    for a, p in enumerate(views):
        pm = pv == p
        if not pm.any():
            continue
        for b, g in enumerate(views):
            if p == g:
                continue
            gm = np.flatnonzero(gv == g)
            if gm.size == 0:
                raise ProtocolError(f"no gallery entries at view {g}")
            nn = gm[nearest_gallery(probe_emb[pm], gallery_emb[gm])]
            mat[a, b] = 100.0 * float(np.mean(gallery_ids[nn] == probe_ids[pm]))
    return mat


def aggregate(matrix: np.ndarray):
    """Per-probe-view means over included cells and the overall mean."""
    inc = ~np.isnan(matrix)
    sums = np.where(inc, matrix, 0.0).sum(axis=1)
    counts = inc.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        view_means = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    overall = float(matrix[inc].mean()) if inc.any() else float("nan")
    return view_means, overall


@dataclass
class EvalReport:
    protocol: str
    views: List[int]
    conditions: Dict[str, ConditionReport] = field(default_factory=dict)

    @property
    def overall(self) -> float:
        cells = np.concatenate([c.matrix[c.included()] for c in self.conditions.values()])
        return float(cells.mean()) if cells.size else float("nan")

    def to_csv(self) -> str:
        lines = [f"# protocol={self.protocol}"]
        for cond, rep in self.conditions.items():
            lines.append(f"# condition={cond}")
            lines.append("probe\\gallery," + ",".join(str(v) for v in self.views) + ",mean")
            for i, v in enumerate(self.views):
                cells = ["-" if np.isnan(x) else f"{x:.2f}" for x in rep.matrix[i]]
                m = rep.view_means[i]
                lines.append(f"{v}," + ",".join(cells) + ("," + ("-" if np.isnan(m) else f"{m:.2f}")))
            lines.append("mean," + ",".join([""] * len(self.views)) + f",{rep.mean:.2f}")
        return "\n".join(lines) + "\n"

    def summary(self) -> str:
        out = [f"protocol={self.protocol}"]
        for cond, rep in self.conditions.items():
            out.append(f"{cond}.mean={rep.mean:.4f}")
            for v, m in zip(self.views, rep.view_means):
                out.append(f"{cond}.view{v}.mean={'nan' if np.isnan(m) else f'{m:.4f}'}")
        out.append(f"overall.mean={self.overall:.4f}")
        return "\n".join(out) + "\n"


def evaluate(ckpt, split: ProtocolSplit) -> EvalReport:
    g_emb = embed_all(split.gallery, ckpt)
    report = EvalReport(split.kind, split.views)
    for cond, probes in split.probes.items():
        p_emb = embed_all(probes, ckpt)
        mat = rank1_matrix(g_emb, [s.identity for s in split.gallery], [s.view for s in split.gallery],
                           p_emb, [s.identity for s in probes], [s.view for s in probes], split.views)
        vm, mean = aggregate(mat)
        report.conditions[cond] = ConditionReport(split.views, mat, vm, mean)
    return report


def parse_report_csv(text: str) -> Dict[str, np.ndarray]:
    """Matrices back from ``EvalReport.to_csv`` (``-`` becomes NaN)."""
    out: Dict[str, np.ndarray] = {}
    cond = None
    rows: List[List[float]] = []
    for line in text.splitlines():
        if line.startswith("# condition="):
            if cond is not None:
                out[cond] = np.array(rows)
            cond, rows = line.split("=", 1)[1], []
        elif cond is not None and line and line[0].isdigit():
            cells = line.split(",")[1:-1]
            rows.append([math.nan if c == "-" else float(c) for c in cells])
    if cond is not None:
        out[cond] = np.array(rows)
    return out


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def export_embeddings(split: ProtocolSplit, ckpt, path) -> int:
    """Write one CSV row per sequence: ``id,view,condition,e0..e{n-1}``."""
    seqs = split.all_sequences()
    emb = embed_all(seqs, ckpt)
    n = emb.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "view", "condition"] + [f"e{i}" for i in range(n)])
        for s, e in zip(seqs, emb):
            w.writerow([s.identity, s.view, f"{s.condition}-{s.seq_index:02d}"]
                       + [f"{x:.9g}" for x in e])
    return len(seqs)
