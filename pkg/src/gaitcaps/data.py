"""Silhouette datasets: preprocessing, directory loading, synthetic walkers,
and p x k batch sampling."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

FRAME_SIZE = 64
LAYOUTS = ("casia-b", "ou-mvlp")
CONDITION_LABELS = {"nm": "NM", "bg": "BG", "cl": "CL"}


class BlankFrameError(ValueError):
    pass


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def preprocess_frame(raw: np.ndarray, size: int = FRAME_SIZE) -> np.ndarray:
    """Crop a silhouette to its bounding box and resize to ``size x size``.

    The crop spans the foreground rows exactly; horizontally it is a window
    as wide as the box is tall, centred on the foreground centroid column and
    zero-padded where it leaves the image. Nearest-neighbour resampling keeps
    the mask binary. Returns a uint8 array of 0/1.
    """
    mask = np.asarray(raw) > 0
    if mask.ndim != 2:
        raise ValueError(f"expected a 2-d frame, got shape {mask.shape}")
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size == 0:
        raise BlankFrameError("blank silhouette")
    top, bottom = rows[0], rows[-1] + 1
    height = bottom - top
    cx = np.nonzero(mask)[1].mean()
    left = int(math.floor(cx + 0.5 - height / 2.0))
    crop = np.zeros((height, height), dtype=bool)
    src_lo, src_hi = max(left, 0), min(left + height, mask.shape[1])
    if src_hi > src_lo:
        crop[:, src_lo - left:src_hi - left] = mask[top:bottom, src_lo:src_hi]
    idx = ((np.arange(size) + 0.5) * height / size).astype(np.intp)
    out = crop[idx[:, None], idx[None, :]].astype(np.float64)
    out = (out >= 0.5).astype(np.uint8)
    if not out.any():
        raise BlankFrameError("blank silhouette after resize")
    return out


# ---------------------------------------------------------------------------
# index
# ---------------------------------------------------------------------------

@dataclass
class GaitSequence:
    identity: str
    condition: str  # NM/BG/CL, or the OU-MVLP session index "00"/"01"
    seq_index: int
    view: int
    frames: np.ndarray = field(repr=False)  # (T, 64, 64) uint8
    path: Optional[Path] = None

    def __post_init__(self):
        if len(self.frames) == 0:
            raise ValueError("a sequence needs at least one frame")

    @property
    def key(self) -> Tuple[str, str, int, int]:
        return (self.identity, self.condition, self.seq_index, self.view)


@dataclass
class DatasetIndex:
    sequences: List[GaitSequence]
    layout: str = "casia-b"

    def __post_init__(self):
        self.sequences = sorted(self.sequences, key=lambda s: s.key)
        keys = [s.key for s in self.sequences]
        if len(set(keys)) != len(keys):
            raise ValueError("duplicate (identity, condition, sequence, view) keys")

    @property
    def identities(self) -> List[str]:
        return sorted({s.identity for s in self.sequences})

    @property
    def views(self) -> List[int]:
        return sorted({s.view for s in self.sequences})

    def __len__(self) -> int:
        return len(self.sequences)

    def subset(self, identities) -> "DatasetIndex":
        keep = set(identities)
        return DatasetIndex([s for s in self.sequences if s.identity in keep], self.layout)

    def by_identity(self) -> Dict[str, List[GaitSequence]]:
        out: Dict[str, List[GaitSequence]] = {}
        for s in self.sequences:
            out.setdefault(s.identity, []).append(s)
        return out


def _read_sequence(folder: Path) -> np.ndarray:
    files = sorted(folder.glob("*.png"))
    frames = []
    for f in files:
        with Image.open(f) as im:
            arr = np.asarray(im.convert("L"))
        try:
            frames.append(preprocess_frame(arr))
        except BlankFrameError:
            log.warning("skipping blank frame %s", f)
    return np.stack(frames) if frames else np.zeros((0, FRAME_SIZE, FRAME_SIZE), np.uint8)


def _parse_condition(name: str, layout: str) -> Tuple[str, int]:
    if layout == "casia-b":
        cond, _, num = name.partition("-")
        if cond.lower() not in CONDITION_LABELS or not num.isdigit():
            raise ValueError(f"bad condition folder {name!r}")
        return CONDITION_LABELS[cond.lower()], int(num)
    if not name.isdigit():
        raise ValueError(f"bad sequence folder {name!r}")
    return name, int(name)


def load_dataset(root, layout: str = "casia-b") -> DatasetIndex:
    """Index and preprocess every sequence under ``root``.

    Sequences containing an unreadable image, or no usable frame, are left
    out with a warning.
    """
    if layout not in LAYOUTS:
        raise ValueError(f"unknown layout {layout!r}; expected one of {LAYOUTS}")
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root not found: {root}")
    seqs = []
    for subj in sorted(p for p in root.iterdir() if p.is_dir()):
        for cond_dir in sorted(p for p in subj.iterdir() if p.is_dir()):
            try:
                cond, num = _parse_condition(cond_dir.name, layout)
            except ValueError as exc:
                log.warning("skipping %s: %s", cond_dir, exc)
                continue
            for view_dir in sorted(p for p in cond_dir.iterdir() if p.is_dir()):
                try:
                    frames = _read_sequence(view_dir)
                except (OSError, SyntaxError, ValueError) as exc:
                    log.warning("excluding sequence %s: unreadable frame (%s)", view_dir, exc)
                    continue
                if len(frames) == 0:
                    log.warning("excluding sequence %s: no valid frames", view_dir)
                    continue
                seqs.append(GaitSequence(subj.name, cond, num, int(view_dir.name), frames, view_dir))
    return DatasetIndex(seqs, layout)


# ---------------------------------------------------------------------------
# synthetic walkers
# ---------------------------------------------------------------------------

CANVAS = (128, 128)
DEFAULT_CONDITIONS = {"nm": 6, "bg": 2, "cl": 2}


@dataclass(frozen=True)
class WalkerShape:
    leg_frac: float      # leg length / body height
    torso_w: float       # torso half-width / body height
    head_r: float
    limb_r: float
    arm_frac: float
    stride: float        # hip swing amplitude, radians
    knee: float          # max knee flex, radians
    arm_swing: float
    lean: float          # forward torso lean, radians
    freq: float          # gait cycles per frame
    shoulder: float      # shoulder width bump / body height


def walker_shape(rng: np.random.Generator) -> WalkerShape:
    u = rng.uniform
    return WalkerShape(
        leg_frac=u(0.40, 0.56), torso_w=u(0.06, 0.15), head_r=u(0.055, 0.095),
        limb_r=u(0.022, 0.05), arm_frac=u(0.30, 0.44), stride=u(0.2, 0.6),
        knee=u(0.1, 0.8), arm_swing=u(0.05, 0.5), lean=u(-0.08, 0.22),
        freq=u(0.04, 0.08), shoulder=u(0.0, 0.05))


def _seg_dist(px, py, ax, ay, bx, by):
    dx, dy = bx - ax, by - ay
    L2 = dx * dx + dy * dy
    t = np.clip(((px - ax) * dx + (py - ay) * dy) / max(L2, 1e-12), 0.0, 1.0)
    return np.hypot(px - ax - t * dx, py - ay - t * dy)


def render_walker(shape: WalkerShape, t: float, view: float, condition: str = "NM",
                  phase: float = 0.0, drift: float = 0.0) -> np.ndarray:
    """Binary silhouette of a walker at frame ``t`` seen from ``view`` degrees.

    The body is drawn as a 2-d side view (90 degrees); other views apply a
    horizontal shear and width scaling to it.
    """
    h, w = CANVAS
    body = 100.0
    top = 14.0
    cx0 = w / 2.0 + drift
    off = math.radians(view - 90.0)
    wscale = 0.4 + 0.6 * abs(math.cos(off))
    shear = 0.35 * math.sin(off)
    hip_y = top + body * (1.0 - shape.leg_frac)

    py, px = np.mgrid[0:h, 0:w].astype(np.float64)
    # inverse view transform: image pixel -> canonical side-view coordinates
    cx = cx0 + (px - cx0 - shear * (py - hip_y)) / wscale
    cy = py

    ang = 2.0 * math.pi * shape.freq * t + phase
    bob = 1.5 * math.cos(2.0 * ang)
    hip = (cx0, hip_y + bob)
    neck_y = top + 2.0 * shape.head_r * body + bob
    neck = (cx0 + math.sin(shape.lean) * (hip_y - neck_y), neck_y)
    lr = shape.limb_r * body
    mask = np.zeros((h, w), dtype=bool)

    # head
    head_c = (neck[0], top + shape.head_r * body + bob)
    mask |= np.hypot(cx - head_c[0], cy - head_c[1]) <= shape.head_r * body
    # torso (widened for a coat)
    tw = shape.torso_w * body * (1.45 if condition == "CL" else 1.0)
    torso_end = (hip[0], hip[1] + (0.12 * body if condition == "CL" else 0.0))
    mask |= _seg_dist(cx, cy, neck[0], neck[1] + tw * 0.5, torso_end[0], torso_end[1]) <= tw
    if shape.shoulder > 0:
        sh = shape.shoulder * body
        mask |= _seg_dist(cx, cy, neck[0] - sh, neck[1] + tw, neck[0] + sh, neck[1] + tw) <= tw * 0.8
    # legs
    leg = shape.leg_frac * body
    for sign in (1.0, -1.0):
        a = sign * shape.stride * math.sin(ang)
        flex = shape.knee * max(0.0, math.sin(ang + sign * math.pi / 2.0))
        knee = (hip[0] + 0.5 * leg * math.sin(a), hip[1] + 0.5 * leg * math.cos(a))
        foot = (knee[0] + 0.5 * leg * math.sin(a - flex), knee[1] + 0.5 * leg * math.cos(a - flex))
        mask |= _seg_dist(cx, cy, *hip, *knee) <= lr * 1.2
        mask |= _seg_dist(cx, cy, *knee, *foot) <= lr
    # arms swing against the legs
    arm = shape.arm_frac * body
    shoulder_pt = (neck[0], neck[1] + tw * 0.6)
    for sign in (1.0, -1.0):
        a = -sign * shape.arm_swing * math.sin(ang)
        elbow = (shoulder_pt[0] + 0.5 * arm * math.sin(a), shoulder_pt[1] + 0.5 * arm * math.cos(a))
        hand = (elbow[0] + 0.5 * arm * math.sin(a + 0.3 * abs(a)), elbow[1] + 0.5 * arm * math.cos(a))
        mask |= _seg_dist(cx, cy, *shoulder_pt, *elbow) <= lr * 0.8
        mask |= _seg_dist(cx, cy, *elbow, *hand) <= lr * 0.7
    if condition == "BG":
        # rigid bag hanging behind the hip
        bag_c = (hip[0] - tw - 0.09 * body, hip[1] - 0.04 * body)
        mask |= ((cx - bag_c[0]) / (0.09 * body)) ** 2 + ((cy - bag_c[1]) / (0.12 * body)) ** 2 <= 1.0
    return mask


def _subseed(seed: int, *parts) -> np.random.Generator:
    return np.random.default_rng([seed] + [int(p) for p in parts])


def synth_dataset(out_dir, n_identities: int, views: Sequence[float],
                  conditions: Union[Mapping[str, int], Sequence[str], None] = None,
                  frames_per_seq: int = 20, seed: int = 42) -> Dict[str, int]:
    """Render a CASIA-B-layout dataset of procedural walkers.

    ``conditions`` maps ``nm``/``bg``/``cl`` to a sequence count (a bare list
    uses the CASIA-B counts 6/2/2). Output is a pure function of the
    arguments. Returns counts of identities, sequences and frames written.
    """
    if n_identities < 2:
        raise ValueError("need at least 2 identities")
    views = [int(v) for v in views]
    if len(views) < 2:
        raise ValueError("need at least 2 views")
    if conditions is None:
        conditions = dict(DEFAULT_CONDITIONS)
    elif not isinstance(conditions, Mapping):
        conditions = {c: DEFAULT_CONDITIONS[c] for c in conditions}
    for c, n in conditions.items():
        if c not in CONDITION_LABELS or n < 1:
            raise ValueError(f"bad condition spec {c}:{n}")
    if frames_per_seq < 1:
        raise ValueError("frames_per_seq must be positive")
    out = Path(out_dir)
    n_seq = n_frames = 0
    for ident in range(n_identities):
        shape = walker_shape(_subseed(seed, 0, ident))
        for ci, (cond, count) in enumerate(sorted(conditions.items())):
            for s in range(1, count + 1):
                for view in views:
                    rng = _subseed(seed, 1, ident, ci, s, view)
                    phase = rng.uniform(0, 2 * math.pi)
                    speed = rng.uniform(0.9, 1.1)
                    start = rng.uniform(-12, 0)
                    folder = out / f"{ident + 1:03d}" / f"{cond}-{s:02d}" / f"{view:03d}"
                    folder.mkdir(parents=True, exist_ok=True)
                    for t in range(frames_per_seq):
                        m = render_walker(shape, t * speed, view, CONDITION_LABELS[cond],
                                          phase, drift=start + 1.2 * t)
                        Image.fromarray((m * 255).astype(np.uint8)).save(folder / f"{t:03d}.png")
                        n_frames += 1
                    n_seq += 1
    return {"identities": n_identities, "sequences": n_seq, "frames": n_frames}


# ---------------------------------------------------------------------------
# batch sampling
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    frames: np.ndarray        # (sum(lengths), 64, 64, 1) float64
    lengths: List[int]
    identities: List[str]
    sequences: List[GaitSequence]


def sample_frames(seq: GaitSequence, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` frames of ``seq``: distinct when possible, with replacement otherwise."""
    count = len(seq.frames)
    idx = rng.choice(count, size=n, replace=count < n)
    return seq.frames[np.sort(idx)]


def sample_batch(index: DatasetIndex, p: int, k: int, frames_per_sample: int,
                 rng: np.random.Generator) -> Batch:
    groups = {i: s for i, s in index.by_identity().items() if len(s) >= k}
    if len(groups) < p:
        raise ValueError(f"need {p} identities with >= {k} sequences, have {len(groups)}")
    ids = sorted(groups)
    chosen = [ids[i] for i in rng.choice(len(ids), size=p, replace=False)]
    seqs, frames = [], []
    for ident in chosen:
        pool = groups[ident]
        for j in rng.choice(len(pool), size=k, replace=False):
            seq = pool[j]
            seqs.append(seq)
            frames.append(sample_frames(seq, frames_per_sample, rng))
    stacked = np.concatenate(frames).astype(np.float64)[..., None]
    return Batch(stacked, [frames_per_sample] * len(seqs), [s.identity for s in seqs], seqs)
