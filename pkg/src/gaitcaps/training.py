"""Two-phase training, checkpoints and the ablation harness."""
from __future__ import annotations

import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import model, pfe
from . import tensor as T
from .config import VARIANTS, TrainConfig
from .data import DatasetIndex, sample_batch

log = logging.getLogger(__name__)

MAGIC = b"GCAP"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    config: TrainConfig
    params: Dict[str, np.ndarray]
    classes: List[str] = field(default_factory=list)
    version: int = FORMAT_VERSION
    # training-run byproducts; not serialised
    pretrain_log: List[float] = field(default_factory=list, repr=False)
    train_log: List[float] = field(default_factory=list, repr=False)

    @property
    def n_classes(self) -> int:
        return int(self.params["cls.b"].shape[0])


def fp32_round(params: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    return {k: v.astype(np.float32).astype(np.float64) for k, v in params.items()}


# ---------------------------------------------------------------------------
# phase 1: triplet pretraining of the extractor
# ---------------------------------------------------------------------------

def pretrain_pfe(index: DatasetIndex, cfg: TrainConfig,
                 params: Optional[Dict[str, np.ndarray]] = None,
                 on_step: Optional[Callable[[int, float], None]] = None):
    """Adam on the batch-all triplet loss for ``cfg.pretrain_steps`` steps.

    Returns ``(pfe_params, loss_log)``; only ``pfe.*`` entries are trained.
    """
    _check_dataset(index, cfg)
    if params is None:
        params = pfe.init_pfe(np.random.default_rng([cfg.seed, 0]), cfg.conv_spec, cfg.bin_dim)
    params = {k: v.copy() for k, v in params.items() if k.startswith("pfe.")}
    state = T.AdamState.zeros_like(params)
    rng = np.random.default_rng([cfg.seed, 1])
    losses: List[float] = []
    for step in range(cfg.pretrain_steps):
        batch = sample_batch(index, cfg.p, cfg.k, cfg.frames_per_sample, rng)
        feats, cache = pfe.pfe_forward_batch(batch.frames, batch.lengths, params,
                                             cfg.conv_spec, cfg.leaky_slope)
        loss, tcache = pfe.triplet_loss_ba_forward(feats, batch.identities, cfg.margin)
        _check_loss(loss, "pretrain", step)
        grads = pfe.pfe_backward_batch(pfe.triplet_loss_ba_backward(tcache), cache, params)
        T.adam_step(params, grads, state, lr=cfg.lr)
        losses.append(loss)
        if on_step:
            on_step(step, loss)
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("pretrain step %d loss %.5f", step, loss)
    return params, losses


# ---------------------------------------------------------------------------
# phase 2: end-to-end cross-entropy
# ---------------------------------------------------------------------------

def train_full(index: DatasetIndex, cfg: TrainConfig,
               pretrained: Optional[Dict[str, np.ndarray]] = None,
               on_step: Optional[Callable[[int, float], None]] = None,
               on_pretrain_step: Optional[Callable[[int, float], None]] = None) -> Checkpoint:
    """Train the whole network with cross-entropy over the training identities.

    Without ``pretrained`` extractor weights, phase 1 runs first (when
    ``cfg.pretrain_steps > 0``). With ``cfg.freeze_pfe`` the extractor is not
    updated in this phase.
    """
    _check_dataset(index, cfg)
    classes = index.identities
    label_of = {c: i for i, c in enumerate(classes)}
    params = model.init_params(cfg, len(classes), np.random.default_rng([cfg.seed, 0]))
    pre_log: List[float] = []
    if pretrained is None and cfg.pretrain_steps > 0:
        pretrained, pre_log = pretrain_pfe(index, cfg, params, on_pretrain_step)
    if pretrained is not None:
        for k, v in pretrained.items():
            if k.startswith("pfe."):
                if params[k].shape != v.shape:
                    raise ValueError(f"pretrained {k} has shape {v.shape}, expected {params[k].shape}")
                params[k] = v.copy()

    state = T.AdamState.zeros_like(params)
    rng = np.random.default_rng([cfg.seed, 2])
    losses: List[float] = []
    for step in range(cfg.train_steps):
        batch = sample_batch(index, cfg.p, cfg.k, cfg.frames_per_sample, rng)
        labels = np.array([label_of[i] for i in batch.identities])
        loss, _, grads = model.loss_and_grads(params, cfg, batch.frames, batch.lengths, labels,
                                              training=True, rng=rng, freeze_pfe=cfg.freeze_pfe)
        _check_loss(loss, "train", step)
        T.adam_step(params, grads, state, lr=cfg.lr)
        losses.append(loss)
        if on_step:
            on_step(step, loss)
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("train step %d loss %.5f", step, loss)
    return Checkpoint(cfg, fp32_round(params), classes, pretrain_log=pre_log, train_log=losses)


def _check_dataset(index: DatasetIndex, cfg: TrainConfig) -> None:
    groups = index.by_identity()
    usable = [i for i, s in groups.items() if len(s) >= max(cfg.k, 2)]
    if len(usable) < max(cfg.p, 2):
        raise ValueError(
            f"degenerate dataset: {len(usable)} identities with >= {max(cfg.k, 2)} sequences, "
            f"need {max(cfg.p, 2)}")


def _check_loss(loss: float, phase: str, step: int) -> None:
    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite {phase} loss {loss} at step {step}")


def training_accuracy(ckpt: Checkpoint, index: DatasetIndex) -> float:
    """Fraction of sequences (all frames) classified as their own identity."""
    label_of = {c: i for i, c in enumerate(ckpt.classes)}
    correct = 0
    for seq in index.sequences:
        frames = seq.frames.astype(np.float64)[..., None]
        probs, _, _ = model.forward(ckpt.params, ckpt.config, frames, [len(frames)])
        correct += int(probs[0].argmax() == label_of[seq.identity])
    return correct / len(index.sequences)


# ---------------------------------------------------------------------------
# checkpoint files
# ---------------------------------------------------------------------------

def _meta_text(ckpt: Checkpoint) -> str:
    text = ckpt.config.to_text()
    if ckpt.classes:
        text += "# classes=" + ",".join(ckpt.classes) + "\n"
    return text


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    meta = _meta_text(ckpt).encode("utf-8")
    out = [MAGIC, struct.pack("<I", ckpt.version), struct.pack("<I", len(meta)), meta,
           struct.pack("<I", len(ckpt.params))]
    for path in sorted(ckpt.params):
        arr = np.ascontiguousarray(ckpt.params[path], dtype="<f4")
        p = path.encode("utf-8")
        out.append(struct.pack("<I", len(p)))
        out.append(p)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ValueError("truncated checkpoint")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def parse_checkpoint(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if len(buf) < 4 or r.take(4) != MAGIC:
        raise ValueError("not a checkpoint (bad magic bytes)")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise ValueError(f"checkpoint version {version} not supported (expected {FORMAT_VERSION})")
    (meta_len,) = r.unpack("<I")
    meta = r.take(meta_len).decode("utf-8")
    classes: List[str] = []
    for line in meta.splitlines():
        if line.startswith("# classes="):
            classes = line[len("# classes="):].split(",")
    cfg = TrainConfig.from_text(meta)
    (count,) = r.unpack("<I")
    params: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (plen,) = r.unpack("<I")
        path = r.take(plen).decode("utf-8")
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}Q")
        n = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape)
        params[path] = data.astype(np.float64)
    if r.pos != len(buf):
        raise ValueError("trailing bytes after checkpoint entries")
    n_classes = int(params["cls.b"].shape[0]) if "cls.b" in params else 0
    expected = param_shapes(cfg, n_classes) if n_classes >= 2 else {}
    for path, arr in params.items():
        if path not in expected:
            raise ValueError(f"unknown parameter path {path!r} for variant {cfg.variant}")
        if arr.shape != expected[path]:
            raise ValueError(f"parameter {path}: stored shape {arr.shape} != expected {expected[path]}")
    missing = sorted(set(expected) - set(params))
    if missing:
        raise ValueError(f"checkpoint lacks parameters: {', '.join(missing)}")
    return Checkpoint(cfg, params, classes, version)


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())


def param_shapes(cfg: TrainConfig, n_classes: int) -> Dict[str, tuple]:
    # initialisation is cheap enough at desk scale to be the shape oracle
    p = model.init_params(cfg, n_classes, np.random.default_rng(0))
    return {k: v.shape for k, v in p.items()}


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------

ABLATION_ROWS = (
    ("full", "Full model"),
    ("uni_gru", "Uni-directional GRU"),
    ("no_rnn", "Without recurrent block"),
    ("no_caps", "Without capsules"),
    ("conv_caps", "Conv in primary capsules"),
)


@dataclass
class AblationReport:
    config: TrainConfig
    protocol: str
    conditions: List[str]
    rows: Dict[str, Dict[str, float]]
    checkpoints: Dict[str, str] = field(default_factory=dict)
    complete: bool = True
    errors: Dict[str, str] = field(default_factory=dict)
    seconds: Dict[str, float] = field(default_factory=dict)

    def to_csv(self) -> str:
        lines = [f"# protocol={self.protocol}",
                 f"# seed={self.config.seed}",
                 f"# variants={','.join(v for v, _ in ABLATION_ROWS)}",
                 f"# complete={'true' if self.complete else 'false'}",
                 "variant,description," + ",".join(self.conditions) + ",mean,checkpoint"]
        for v, desc in ABLATION_ROWS:
            row = self.rows.get(v)
            if row is None:
                cells = ["-"] * (len(self.conditions) + 1)
            else:
                cells = [f"{row[c]:.2f}" for c in self.conditions] + [f"{row['mean']:.2f}"]
            lines.append(",".join([v, desc] + cells + [self.checkpoints.get(v, "")]))
        return "\n".join(lines) + "\n"


def ablate(train_index: DatasetIndex, test_index: DatasetIndex, cfg: TrainConfig,
           protocol: str = "synthetic", checkpoint_dir=None,
           variants: Sequence[str] = tuple(v for v, _ in ABLATION_ROWS)) -> AblationReport:
    """Train and evaluate each architectural variant with the same seed."""
    from . import evaluation

    split = evaluation.build_protocol(test_index, protocol)
    conditions = list(split.probes)
    report = AblationReport(cfg, protocol, conditions, {})
    for v in variants:
        if v not in VARIANTS:
            raise ValueError(f"unknown variant {v!r}")
        vcfg = cfg.replace(variant=v)
        t0 = time.perf_counter()
        try:
            ckpt = train_full(train_index, vcfg)
            ev = evaluation.evaluate(ckpt, split)
        except (KeyboardInterrupt, FloatingPointError, ValueError, MemoryError) as exc:
            report.complete = False
            report.errors[v] = f"{type(exc).__name__}: {exc}"
            log.error("variant %s failed: %s", v, exc)
            if isinstance(exc, KeyboardInterrupt):
                break
            continue
        report.seconds[v] = time.perf_counter() - t0
        row = {c: ev.conditions[c].mean for c in conditions}
        row["mean"] = float(np.mean([row[c] for c in conditions]))
        report.rows[v] = row
        if checkpoint_dir is not None:
            path = Path(checkpoint_dir) / f"{v}.gcap"
            path.parent.mkdir(parents=True, exist_ok=True)
            save_checkpoint(ckpt, path)
            report.checkpoints[v] = str(path)
    if len(report.rows) != len(variants):
        report.complete = False
    return report
