"""The four-step adaptation procedure, evaluation and checkpoint I/O.

1. train a segmenter on the labelled source domain;
2. train two generators and two discriminators on unpaired source/target images;
3. translate every source patch into the target domain (labels untouched);
4. fine-tune the source segmenter on the translated patches, scoring the
   target domain after every epoch.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import struct
import time
import warnings
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
from PIL import Image

from . import autograd as ag
from .autograd import Adam
from .config import PipelineConfig, TrainConfig, config_digest, to_dict
from .data import DomainDataset, SynthBenchmark, denormalize, save_dataset, synth_generate
from .errors import (
    CheckpointError,
    CheckpointShapeError,
    CheckpointVersionError,
    DataError,
    NumericalError,
    ShapeError,
)
from .losses import cycle_loss, discriminator_loss, generator_adv_loss, segmentation_loss, total_generator_objective
from .metrics import ConfusionMatrix, MetricsReport, aggregate, history_rows, write_history_csv
from .networks import (
    REAL,
    DiscriminatorConfig,
    Generator,
    GeneratorConfig,
    Network,
    SegmenterConfig,
    Segmenter,
    build_network,
    config_to_dict,
    init_discriminator,
    init_generator,
    init_segmenter,
)

log = logging.getLogger("segadapt")

# --- checkpoints --------------------------------------------------------------

MAGIC = b"SGCK"
FORMAT_VERSION = 1
EVAL_BATCH = 16


class ConfigDigestWarning(UserWarning):
    """A checkpoint was produced under a different configuration."""


@dataclass
class Checkpoint:
    kind: str
    params: Dict[str, np.ndarray]
    network_config: dict
    metadata: dict = field(default_factory=dict)
    config_digest: str = ""
    format_version: int = FORMAT_VERSION

    @classmethod
    def from_network(cls, net: Network, config_digest: str = "", **metadata) -> "Checkpoint":
        return cls(net.kind, net.state_dict(), config_to_dict(net.config), dict(metadata), config_digest)

    def to_network(self) -> Network:
        net = build_network(self.kind, self.network_config)
        net.load_state_dict(self.params)
        return net


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    """Write the binary checkpoint format (all integers and values little-endian).

    Layout: magic ``SGCK``; u32 format version; length-prefixed kind, config
    digest and JSON header (network config + metadata); u32 entry count; then
    per entry a length-prefixed name, u32 ndim, ndim x u32 dims and float32 data.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = json.dumps({"network_config": ckpt.network_config, "metadata": ckpt.metadata}, sort_keys=True)
    parts = [MAGIC, struct.pack("<I", ckpt.format_version), _pack_str(ckpt.kind), _pack_str(ckpt.config_digest), _pack_str(header)]
    parts.append(struct.pack("<I", len(ckpt.params)))
    for name, arr in ckpt.params.items():
        arr = np.asarray(arr)
        parts.append(_pack_str(name))
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    path.write_bytes(b"".join(parts))
    return path


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def load_checkpoint(path, expected_digest: Optional[str] = None) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    r = _Reader(path.read_bytes(), path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    kind = r.string()
    digest = r.string()
    header = json.loads(r.string())
    params = {}
    for _ in range(r.u32()):
        name = r.string()
        ndim = r.u32()
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
    if expected_digest is not None and digest != expected_digest:
        warnings.warn(
            f"{path}: config digest {digest} differs from the current config {expected_digest}",
            ConfigDigestWarning,
            stacklevel=2,
        )
    return Checkpoint(kind, params, header["network_config"], header["metadata"], digest, version)


def _as_network(m, kind: str) -> Network:
    net = m.to_network() if isinstance(m, Checkpoint) else m
    if net.kind != kind:
        raise CheckpointShapeError(f"expected a {kind} checkpoint, got {net.kind}")
    return net


# --- helpers -------------------------------------------------------------------

def _batches(n: int, batch_size: int, rng: Optional[np.random.Generator]):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def _train_split(ds: DomainDataset) -> DomainDataset:
    return ds.split("train") if "train" in ds.splits() else ds


def _holdout_split(ds: DomainDataset) -> Optional[DomainDataset]:
    return ds.split("test") if "test" in ds.splits() else None


def _check_finite(value: float, what: str) -> float:
    if not np.isfinite(value):
        raise NumericalError(f"non-finite {what}")
    return value


@dataclass
class EpochRecord:
    epoch: int
    train_loss: Optional[float]
    report: MetricsReport


def _history_csv(records: Sequence[EpochRecord], path) -> None:
    rows = []
    for r in records:
        rows += history_rows(r.epoch, r.report, None if r.train_loss is None else {"train_loss": r.train_loss})
    write_history_csv(path, rows)


# --- evaluation ----------------------------------------------------------------

def predict(model, images: np.ndarray) -> np.ndarray:
    net = _as_network(model, "segmenter")
    out = []
    with ag.no_grad():
        for i in range(0, len(images), EVAL_BATCH):
            out.append(np.argmax(net(images[i : i + EVAL_BATCH]).data, axis=1))
    return np.concatenate(out) if out else np.zeros((0,) + images.shape[2:], dtype=np.int64)


def confusion_on(model, ds: DomainDataset) -> ConfusionMatrix:
    ds.require_labels("evaluate")
    net = _as_network(model, "segmenter")
    if net.config.num_classes != ds.schema.num_classes:
        raise DataError(f"model predicts {net.config.num_classes} classes, dataset has {ds.schema.num_classes}")
    cm = ConfusionMatrix(ds.schema.num_classes)
    cm.update(predict(net, ds.images()), ds.masks())
    return cm


def evaluate(model, ds: DomainDataset) -> MetricsReport:
    """Argmax predictions -> confusion matrix -> aggregate report."""
    return aggregate(confusion_on(model, ds), ds.schema.class_names)


# --- step 1 / step 4: supervised segmentation ------------------------------------

def _fit_segmenter(
    net: Segmenter,
    train: DomainDataset,
    evalset: DomainDataset,
    cfg: TrainConfig,
    stage: str,
    baseline: bool,
    digest: str,
):
    cfg.validate()
    train.require_labels(stage)
    X, Y = train.images(), train.masks()
    opt = Adam(net.parameters(), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 101]))
    history: List[EpochRecord] = []
    base_report = evaluate(net, evalset) if baseline else None
    best_acc, best_ckpt = -1.0, None
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.time()
        losses = []
        for idx in _batches(len(X), cfg.batch_size, rng if cfg.shuffle else None):
            opt.zero_grad()
            loss = segmentation_loss(net(X[idx], training=True), Y[idx])
            loss.backward()
            opt.step()
            losses.append(_check_finite(loss.item(), f"{stage} loss at epoch {epoch}"))
        if epoch % cfg.eval_every and epoch != cfg.epochs:
            continue
        report = evaluate(net, evalset)
        train_loss = float(np.mean(losses))
        history.append(EpochRecord(epoch, train_loss, report))
        log.info(
            "%s epoch %d/%d loss %.4f eval accuracy %.4f mIoU %.4f (%.1fs)",
            stage, epoch, cfg.epochs, train_loss, report.pixel_accuracy, report.mean_iou or 0.0, time.time() - t0,
        )
        if report.pixel_accuracy > best_acc:
            best_acc = report.pixel_accuracy
            best_ckpt = Checkpoint.from_network(net, digest, epoch=epoch, seed=cfg.seed, stage=stage)
    return best_ckpt, history, base_report


@dataclass
class SegmenterResult:
    checkpoint: Checkpoint
    history: List[EpochRecord]


def step1_train_segmenter(
    source: DomainDataset,
    cfg: TrainConfig,
    seg_config: Optional[SegmenterConfig] = None,
    run_dir=None,
    digest: str = "",
) -> SegmenterResult:
    """Train a fresh segmenter on the labelled source domain.

    Validation uses the source ``test`` split when present; the checkpoint with
    the best validation pixel accuracy is returned.
    """
    source.require_labels("step 1")
    train = _train_split(source)
    val = _holdout_split(source) or train
    c, _, _ = source.tile_shape
    seg_config = seg_config or SegmenterConfig(in_channels=c, num_classes=source.schema.num_classes)
    if seg_config.in_channels != c or seg_config.num_classes != source.schema.num_classes:
        raise DataError(
            f"segmenter config ({seg_config.in_channels} channels, {seg_config.num_classes} classes) "
            f"does not match the dataset ({c} channels, {source.schema.num_classes} classes)"
        )
    net = init_segmenter(seg_config, cfg.seed)
    ckpt, history, _ = _fit_segmenter(net, train, val, cfg, "step1", False, digest)
    if run_dir is not None:
        d = Path(run_dir)
        d.mkdir(parents=True, exist_ok=True)
        save_checkpoint(ckpt, d / "m_s.ckpt")
        _history_csv(history, d / "history.csv")
        (d / "summary.json").write_text(json.dumps({
            "best_epoch": ckpt.metadata["epoch"],
            "best_val_accuracy": max(r.report.pixel_accuracy for r in history),
            "final_val": history[-1].report.to_dict(),
        }, indent=2))
    return SegmenterResult(ckpt, history)


@dataclass
class FinetuneResult:
    checkpoint: Checkpoint  # best target-accuracy model (M_T)
    baseline: MetricsReport  # target metrics before any update (epoch 0)
    history: List[EpochRecord]  # one record per fine-tuning epoch

    @property
    def best(self) -> EpochRecord:
        return max(self.history, key=lambda r: r.report.pixel_accuracy)


def step4_finetune(
    m_s: Union[Checkpoint, Segmenter],
    translated: DomainDataset,
    target_eval: DomainDataset,
    cfg: TrainConfig,
    run_dir=None,
    digest: str = "",
) -> FinetuneResult:
    """Warm-start from the source model and train on translated, source-labelled patches."""
    translated.require_labels("step 4")
    target_eval.require_labels("step 4 target evaluation")
    net = _as_network(m_s, "segmenter").clone()
    k = net.config.num_classes
    if translated.schema.num_classes != k or target_eval.schema.num_classes != k:
        raise DataError(
            f"class counts differ: model {k}, translated {translated.schema.num_classes}, "
            f"target {target_eval.schema.num_classes}"
        )
    ckpt, history, baseline = _fit_segmenter(net, translated, target_eval, cfg, "step4", True, digest)
    if run_dir is not None:
        d = Path(run_dir)
        d.mkdir(parents=True, exist_ok=True)
        save_checkpoint(ckpt, d / "m_t.ckpt")
        _history_csv([EpochRecord(0, None, baseline)] + history, d / "history.csv")
        best = max(history, key=lambda r: r.report.pixel_accuracy)
        (d / "summary.json").write_text(json.dumps({
            "baseline_target_accuracy": baseline.pixel_accuracy,
            "best_epoch": best.epoch,
            "best_target_accuracy": best.report.pixel_accuracy,
            "before": baseline.to_dict(),
            "after": best.report.to_dict(),
        }, indent=2))
    return FinetuneResult(ckpt, baseline, history)


# --- step 2: adversarial translation ------------------------------------------------

class TrainingDiverged(NumericalError):
    """GAN training produced a non-finite value; ``checkpoints`` holds the last good state."""

    def __init__(self, message: str, checkpoints: Dict[str, Checkpoint]):
        super().__init__(message)
        self.checkpoints = checkpoints


@dataclass
class GanResult:
    g_st: Checkpoint
    g_ts: Checkpoint
    d_s: Checkpoint
    d_t: Checkpoint
    history: List[dict]
    stopped_early: bool

    def checkpoints(self) -> Dict[str, Checkpoint]:
        return {"g_st": self.g_st, "g_ts": self.g_ts, "d_s": self.d_s, "d_t": self.d_t}


def gan_generator_terms(g_st, g_ts, d_s, d_t, x_s, x_t, fake_t, fake_s, lambda_cycle, training=True, rng=None):
    """Generator-side losses given already computed translations ``fake_t``/``fake_s``.

    ``g_st``/``g_ts``/``d_s``/``d_t`` are callables, so the terms can be
    evaluated with arbitrary mappings (e.g. identity) in tests.
    """
    rec_s = g_ts(fake_t, training=training, rng=rng)
    rec_t = g_st(fake_s, training=training, rng=rng)
    adv_st = generator_adv_loss(d_t(fake_t)[:, REAL])
    adv_ts = generator_adv_loss(d_s(fake_s)[:, REAL])
    cyc = cycle_loss(x_s, rec_s, x_t, rec_t)
    return adv_st, adv_ts, cyc, total_generator_objective(adv_st, adv_ts, cyc, lambda_cycle)


def _disc_correct(p_real: np.ndarray, p_fake: np.ndarray) -> tuple:
    return int((p_real > 0.5).sum() + (p_fake <= 0.5).sum()), p_real.size + p_fake.size


def heldout_discriminator_accuracy(g_st, g_ts, d_s, d_t, src: np.ndarray, tgt: np.ndarray) -> float:
    correct = total = 0
    with ag.no_grad():
        for i in range(0, max(len(src), len(tgt)), EVAL_BATCH):
            xs, xt = src[i : i + EVAL_BATCH], tgt[i : i + EVAL_BATCH]
            if len(xt):
                real = d_t(xt).data[:, REAL]
                c, n = _disc_correct(real, np.zeros(0))
                correct, total = correct + c, total + n
                fake = d_s(g_ts(xt).data).data[:, REAL]
                c, n = _disc_correct(np.zeros(0), fake)
                correct, total = correct + c, total + n
            if len(xs):
                real = d_s(xs).data[:, REAL]
                c, n = _disc_correct(real, np.zeros(0))
                correct, total = correct + c, total + n
                fake = d_t(g_st(xs).data).data[:, REAL]
                c, n = _disc_correct(np.zeros(0), fake)
                correct, total = correct + c, total + n
    return correct / total if total else 0.0


def channel_mean_gap(a: np.ndarray, b: np.ndarray) -> float:
    """Mean absolute difference between per-channel means of two image stacks."""
    return float(np.abs(a.mean(axis=(0, 2, 3)) - b.mean(axis=(0, 2, 3))).mean())


def translate_images(g: Generator, images: np.ndarray) -> np.ndarray:
    out = []
    with ag.no_grad():
        for i in range(0, len(images), EVAL_BATCH):
            out.append(g(images[i : i + EVAL_BATCH], training=False).data)
    return np.concatenate(out) if out else images.copy()


def _write_samples(path, xs, g_st, g_ts, xt) -> None:
    with ag.no_grad():
        ft = g_st(xs).data
        rs = g_ts(ft).data
        fs = g_ts(xt).data
        rt = g_st(fs).data

    def row(*stacks):
        return np.concatenate([np.concatenate(list(s), axis=2) for s in stacks], axis=1)

    grid = np.concatenate([row(xs, ft, rs), row(xt, fs, rt)], axis=2)
    Image.fromarray(denormalize(grid[:3]).transpose(1, 2, 0)).save(path)


def step2_train_gan(
    source: DomainDataset,
    target: DomainDataset,
    cfg: TrainConfig,
    gen_config: Optional[GeneratorConfig] = None,
    disc_config: Optional[DiscriminatorConfig] = None,
    run_dir=None,
    digest: str = "",
    on_epoch: Optional[Callable[[dict, Dict[str, Network]], None]] = None,
) -> GanResult:
    """Jointly train both translation directions.

    Each batch performs one discriminator update on real vs. generated images
    followed by one update of both generators on adversarial + cycle losses.
    Training stops once discriminator accuracy exceeds ``d_accuracy_min`` and
    the rolling generator objective drops below ``g_loss_max``, or after
    ``cfg.epochs`` epochs. ``on_epoch(record, networks)`` is called after
    every epoch with the live networks (useful for monitoring).
    """
    cfg.validate()
    if not len(source) or not len(target):
        raise DataError("step 2 needs non-empty source and target datasets")
    if source.tile_shape[1:] != target.tile_shape[1:]:
        raise ShapeError(f"source tiles {source.tile_shape} and target tiles {target.tile_shape} differ in size")
    src_train, tgt_train = _train_split(source), _train_split(target)
    src_hold, tgt_hold = _holdout_split(source), _holdout_split(target)
    if cfg.d_accuracy_on == "heldout" and (src_hold is None or tgt_hold is None):
        raise DataError("held-out discriminator accuracy needs 'test' splits in both domains")
    cs, ct = source.tile_shape[0], target.tile_shape[0]
    gen_config = gen_config or GeneratorConfig()
    disc_config = disc_config or DiscriminatorConfig()
    seeds = np.random.SeedSequence([cfg.seed, 202]).generate_state(5)
    g_st = init_generator(_with_channels(gen_config, cs, ct), int(seeds[0]))
    g_ts = init_generator(_with_channels(gen_config, ct, cs), int(seeds[1]))
    d_s = init_discriminator(_with_in(disc_config, cs), int(seeds[2]))
    d_t = init_discriminator(_with_in(disc_config, ct), int(seeds[3]))
    rng = np.random.default_rng(int(seeds[4]))
    opt_g = Adam(g_st.parameters() + g_ts.parameters(), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    d_params = d_s.parameters() + d_t.parameters()
    opt_d = Adam(d_params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    XS, XT = src_train.images(), tgt_train.images()
    HS = src_hold.images() if src_hold is not None else None
    HT = tgt_hold.images() if tgt_hold is not None else None
    out_dir = Path(run_dir) if run_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    def snapshot(epoch):
        return {
            name: Checkpoint.from_network(net, digest, epoch=epoch, seed=cfg.seed, stage="step2")
            for name, net in (("g_st", g_st), ("g_ts", g_ts), ("d_s", d_s), ("d_t", d_t))
        }

    g_window: deque = deque(maxlen=cfg.rolling_window)
    acc_window: deque = deque(maxlen=cfg.rolling_window)
    history: List[dict] = []
    stopped = False
    last_good = snapshot(0)
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.time()
        sums = dict(d_loss_real=0.0, d_loss_fake=0.0, g_adv_st=0.0, g_adv_ts=0.0, cycle=0.0, g_total=0.0)
        nb = 0
        tgt_order = rng.permutation(len(XT))
        try:
            for bi, idx in enumerate(_batches(len(XS), cfg.batch_size, rng if cfg.shuffle else None)):
                t_idx = tgt_order[(bi * cfg.batch_size + np.arange(len(idx))) % len(XT)]
                xs, xt = XS[idx], XT[t_idx]
                fake_t = g_st(xs, training=True, rng=rng)
                fake_s = g_ts(xt, training=True, rng=rng)
                # discriminator update on detached translations
                opt_d.zero_grad()
                pt_real = d_t(xt)[:, REAL]
                pt_fake = d_t(fake_t.detach())[:, REAL]
                ps_real = d_s(xs)[:, REAL]
                ps_fake = d_s(fake_s.detach())[:, REAL]
                l_real = -(ag.mean(ag.log(ag.clip(pt_real, 1e-7, 1 - 1e-7))) + ag.mean(ag.log(ag.clip(ps_real, 1e-7, 1 - 1e-7))))
                loss_d = discriminator_loss(pt_real, pt_fake) + discriminator_loss(ps_real, ps_fake)
                loss_d.backward()
                opt_d.step()
                c1, n1 = _disc_correct(pt_real.data, pt_fake.data)
                c2, n2 = _disc_correct(ps_real.data, ps_fake.data)
                acc_window.append((c1 + c2, n1 + n2))
                # generator update through the freshly updated discriminators
                for p in d_params:
                    p.requires_grad = False
                opt_g.zero_grad()
                adv_st, adv_ts, cyc, total = gan_generator_terms(
                    g_st, g_ts, d_s, d_t, xs, xt, fake_t, fake_s, cfg.lambda_cycle, True, rng
                )
                total.backward()
                opt_g.step()
                for p in d_params:
                    p.requires_grad = True
                g_val = _check_finite(total.item(), "generator objective")
                g_window.append(g_val)
                ld, lr_ = loss_d.item(), l_real.item()
                sums["d_loss_real"] += lr_
                sums["d_loss_fake"] += ld - lr_
                sums["g_adv_st"] += adv_st.item()
                sums["g_adv_ts"] += adv_ts.item()
                sums["cycle"] += cyc.item()
                sums["g_total"] += g_val
                nb += 1
        except NumericalError as e:
            for p in d_params:
                p.requires_grad = True
            if out_dir is not None:
                for name, ck in last_good.items():
                    save_checkpoint(ck, out_dir / f"{name}.ckpt")
            raise TrainingDiverged(f"GAN training diverged in epoch {epoch}: {e}", last_good) from e
        rec = {k: v / max(nb, 1) for k, v in sums.items()}
        rec["epoch"] = epoch
        rec["g_loss_rolling"] = float(np.mean(g_window))
        c, n = map(sum, zip(*acc_window))
        rec["d_accuracy_train"] = c / n
        if HS is not None and HT is not None:
            rec["d_accuracy_heldout"] = heldout_discriminator_accuracy(g_st, g_ts, d_s, d_t, HS, HT)
        d_acc = rec["d_accuracy_heldout"] if cfg.d_accuracy_on == "heldout" else rec["d_accuracy_train"]
        rec["d_accuracy"] = d_acc
        history.append(rec)
        last_good = snapshot(epoch)
        if on_epoch is not None:
            on_epoch(rec, {"g_st": g_st, "g_ts": g_ts, "d_s": d_s, "d_t": d_t})
        log.info(
            "step2 epoch %d/%d D-acc %.3f G-loss %.3f cycle %.4f (%.1fs)",
            epoch, cfg.epochs, d_acc, rec["g_loss_rolling"], rec["cycle"], time.time() - t0,
        )
        if out_dir is not None and cfg.sample_every and epoch % cfg.sample_every == 0:
            k = min(4, len(XS), len(XT))
            _write_samples(out_dir / f"samples_epoch{epoch:03d}.png", XS[:k], g_st, g_ts, XT[:k])
        if d_acc > cfg.d_accuracy_min and rec["g_loss_rolling"] < cfg.g_loss_max:
            stopped = True
            log.info("step2 stop rule met at epoch %d", epoch)
            break
    result = GanResult(**last_good, history=history, stopped_early=stopped)
    if out_dir is not None:
        for name, ck in result.checkpoints().items():
            save_checkpoint(ck, out_dir / f"{name}.ckpt")
        rows = []
        for rec in history:
            rows += [(rec["epoch"], k, "all", v) for k, v in rec.items() if k != "epoch"]
        write_history_csv(out_dir / "losses.csv", rows)
        (out_dir / "summary.json").write_text(json.dumps({"stopped_early": stopped, "epochs": len(history), "final": history[-1]}, indent=2))
    return result


def _with_channels(cfg: GeneratorConfig, cin: int, cout: int) -> GeneratorConfig:
    return dataclasses.replace(cfg, in_channels=cin, out_channels=cout)


def _with_in(cfg: DiscriminatorConfig, cin: int) -> DiscriminatorConfig:
    return dataclasses.replace(cfg, in_channels=cin)


# --- step 3: translation ---------------------------------------------------------

def step3_translate(g_st: Union[Checkpoint, Generator], source: DomainDataset, schema=None) -> DomainDataset:
    """Replace every source image by its translation; masks and order are kept exactly."""
    g = _as_network(g_st, "generator")
    c = source.tile_shape[0]
    if g.config.in_channels != c:
        raise ShapeError(f"generator expects {g.config.in_channels} channels, source has {c}")
    images = translate_images(g, source.images()) if len(source) else []
    out = source.with_images(list(images), name=f"{source.name}_translated")
    out = out.with_masks([None if p.mask is None else p.mask.copy() for p in out.patches])
    if schema is not None:
        out = DomainDataset(schema, out.patches, out.name)
    return out


# --- full run --------------------------------------------------------------------

@dataclass
class PipelineResult:
    segmenter: SegmenterResult
    gan: GanResult
    translated: DomainDataset
    finetune: FinetuneResult
    source_accuracy: float
    pre_target_accuracy: float
    mask_checksums: Dict[str, str]

    @property
    def best_target_accuracy(self) -> float:
        return self.finetune.best.report.pixel_accuracy

    @property
    def final_target_accuracy(self) -> float:
        return self.finetune.history[-1].report.pixel_accuracy

    def summary(self) -> dict:
        return {
            "source_accuracy": self.source_accuracy,
            "pre_target_accuracy": self.pre_target_accuracy,
            "best_target_accuracy": self.best_target_accuracy,
            "final_target_accuracy": self.final_target_accuracy,
            "gan_epochs": len(self.gan.history),
            "gan_stopped_early": self.gan.stopped_early,
            "mask_checksums": self.mask_checksums,
        }


def run_pipeline(
    cfg: PipelineConfig,
    run_dir=None,
    bench: Optional[SynthBenchmark] = None,
) -> PipelineResult:
    """Generate (or take) a benchmark and run all four steps, writing ``run_dir`` if given."""
    cfg.validate()
    digest = config_digest(cfg)
    out = Path(run_dir) if run_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(to_dict(cfg), indent=2))
    if bench is None:
        bench = synth_generate(cfg.synth, cfg.seed)
    source, target = bench.source, bench.target
    target_eval = bench.target_eval("test")
    checksums = {"source_ingested": source.mask_checksum()}
    nc = source.schema.num_classes
    seg_cfg = dataclasses.replace(cfg.segmenter, in_channels=source.tile_shape[0], num_classes=nc)
    step = lambda name: None if out is None else out / name  # noqa: E731
    seg = step1_train_segmenter(source, cfg.seg_train, seg_cfg, step("step1_segmenter"), digest)
    src_val = _holdout_split(source) or source
    source_acc = evaluate(seg.checkpoint, src_val).pixel_accuracy
    gan = step2_train_gan(source, target, cfg.gan_train, cfg.generator, cfg.discriminator, step("step2_gan"), digest)
    translated = step3_translate(gan.g_st, _train_split(source))
    checksums["translated"] = translated.mask_checksum()
    checksums["source_train"] = _train_split(source).mask_checksum()
    if out is not None:
        save_dataset(translated, out / "step3_translated")
    ft = step4_finetune(seg.checkpoint, translated, target_eval, cfg.finetune, step("step4_finetune"), digest)
    checksums["finetune_input"] = translated.mask_checksum()
    result = PipelineResult(seg, gan, translated, ft, source_acc, ft.baseline.pixel_accuracy, checksums)
    if out is not None:
        (out / "summary.json").write_text(json.dumps(result.summary(), indent=2))
    return result
