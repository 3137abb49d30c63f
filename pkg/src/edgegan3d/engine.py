"""Adversarial training loop, checkpoints, datasets and the ablation harness."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .adversarial import LossWeights, PatchDiscriminator, discriminator_loss, generator_loss
from .config import TrainConfig
from .data import (
    EdgeMap, PhantomSpec, SegMask, Volume, extract_edge_map, generate_phantom, load_mask, load_volume,
    normalize, resample, save_mask, save_volume,
)
from .gfe import EASNet
from .metrics import MetricReport, binarize, evaluate_case, summarize

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
HISTORY_FIELDS = ("epoch", "loss_d", "loss_g", "dice", "jaccard", "hd", "precision", "recall", "seconds")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class Sample:
    case_id: str
    image: np.ndarray
    mask: np.ndarray
    edge: np.ndarray
    spacing: tuple

    def tensors(self):
        x = torch.from_numpy(self.image)[None, None]
        y = torch.from_numpy(self.mask.astype(np.float32))[None, None]
        e = torch.from_numpy(self.edge.astype(np.float32))[None, None]
        return x, y, e


def prepare_sample(volume: Volume, mask: SegMask, shape=None, case_id="", edge: EdgeMap | None = None) -> Sample:
    """Resample to the network input shape, z-score, and derive the edge map."""
    if volume.shape != mask.shape:
        raise ValueError(f"{case_id}: volume shape {volume.shape} != mask shape {mask.shape}")
    if shape is not None and tuple(shape) != volume.shape:
        volume = resample(volume, shape, "trilinear")
        mask = resample(mask, shape, "nearest")
        edge = None
    volume = normalize(volume)
    if edge is None:
        edge = extract_edge_map(mask)
    return Sample(case_id, volume.values, mask.values, edge.values, volume.spacing)


def synthesize_dataset(n, shape=(32, 48, 48), seed=0, **spec_kwargs) -> list[tuple[str, Volume, SegMask]]:
    return [
        (f"case_{i:03d}", *generate_phantom(PhantomSpec(seed=seed + i, shape=tuple(shape), **spec_kwargs)))
        for i in range(n)
    ]


def write_dataset(cases, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for case_id, vol, mask in cases:
        save_volume(out / f"{case_id}_image", vol)
        save_mask(out / f"{case_id}_mask", mask)
        save_mask(out / f"{case_id}_edge", extract_edge_map(mask))


def read_dataset(data_dir) -> list[tuple[str, Volume, SegMask]]:
    data = Path(data_dir)
    images = sorted(data.glob("*_image.hdr"))
    if not images:
        raise FileNotFoundError(f"no *_image.hdr volumes in {data}")
    cases = []
    for hdr in images:
        case_id = hdr.name[: -len("_image.hdr")]
        cases.append((case_id, load_volume(hdr), load_mask(data / f"{case_id}_mask.hdr")))
    return cases


def split_cases(cases, val_fraction=0.2):
    n_val = max(1, round(len(cases) * val_fraction))
    if n_val >= len(cases):
        raise ValueError(f"need at least 2 cases to split train/val, got {len(cases)}")
    return cases[:-n_val], cases[-n_val:]


def count_parameters(module: torch.nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def safe_report(pred, gt, spacing, case_id) -> MetricReport:
    """Like evaluate_case but scores an empty prediction instead of raising."""
    if not np.any(pred):
        return MetricReport(case_id, 0.0, 0.0, math.inf, 0.0, 0.0)
    return evaluate_case(pred, gt, spacing, case_id)


class Trainer:
    """Generator/discriminator pair with their optimizers and run state."""

    def __init__(self, config: TrainConfig | None = None):
        self.config = config = config or TrainConfig()
        torch.manual_seed(config.seed)
        self.generator = EASNet(config.model_config())
        self.discriminator = PatchDiscriminator(base=config.disc_channels)
        self.weights = LossWeights(config.alpha, config.effective_beta)
        self.opt_g = torch.optim.Adam(
            [p for p in self.generator.parameters() if p.requires_grad], lr=config.lr, betas=config.betas
        )
        self.opt_d = torch.optim.Adam(self.discriminator.parameters(), lr=config.lr, betas=config.betas)
        self.epoch = 0
        self.step = 0
        self.history: list[dict] = []
        self.best_dice = -1.0

    # -- one alternating update ------------------------------------------

    def train_step(self, x, y, y_edge, update_discriminator=True, update_generator=True):
        """Discriminator update on the detached prediction, then generator update."""
        G, D = self.generator, self.discriminator
        G.train()
        D.train()
        want_edge = self.weights.beta > 0
        if update_generator:
            seg, edge = G(x, with_edge=want_edge)
        else:
            with torch.no_grad():
                seg, edge = G(x, with_edge=want_edge)

        if update_discriminator:
            loss_d = discriminator_loss(D, x, y, seg)
            self.opt_d.zero_grad(set_to_none=True)
            loss_d.backward()
            self.opt_d.step()
        else:
            with torch.no_grad():
                loss_d = discriminator_loss(D, x, y, seg)

        D.requires_grad_(False)
        try:
            if update_generator:
                loss_g, _ = generator_loss(D, x, y, y_edge, seg, edge, self.weights)
                self.opt_g.zero_grad(set_to_none=True)
                loss_g.backward()
                self.opt_g.step()
            else:
                with torch.no_grad():
                    loss_g, _ = generator_loss(D, x, y, y_edge, seg, edge, self.weights)
        finally:
            D.requires_grad_(True)

        self.step += 1
        ld, lg = loss_d.item(), loss_g.item()
        if not (math.isfinite(ld) and math.isfinite(lg)):
            raise TrainingDiverged(
                f"non-finite loss at epoch {self.epoch + 1} step {self.step}: loss_d={ld}, loss_g={lg}"
            )
        return ld, lg

    # -- evaluation -------------------------------------------------------

    @torch.no_grad()
    def predict(self, image: np.ndarray) -> np.ndarray:
        self.generator.eval()
        seg, _ = self.generator(torch.from_numpy(np.ascontiguousarray(image, np.float32))[None, None], with_edge=False)
        return seg[0, 0].numpy()

    def evaluate(self, samples: list[Sample]) -> list[MetricReport]:
        return [safe_report(binarize(self.predict(s.image)), s.mask, s.spacing, s.case_id) for s in samples]

    # -- epochs -----------------------------------------------------------

    def _batches(self, train: list[Sample], epoch: int):
        order = np.random.default_rng([self.config.seed, epoch]).permutation(len(train))
        bs = self.config.batch_size
        for i in range(0, len(order), bs):
            items = [train[j].tensors() for j in order[i:i + bs]]
            yield tuple(torch.cat(parts, dim=0) for parts in zip(*items))

    def train_epoch(self, train: list[Sample]):
        losses = []
        for x, y, e in self._batches(train, self.epoch):
            losses.append(self.train_step(x, y, e))
        self.epoch += 1
        ld, lg = np.mean(losses, axis=0) if losses else (math.nan, math.nan)
        return float(ld), float(lg)

    def fit(self, train: list[Sample], val: list[Sample], out_dir=None, time_budget=None):
        """Train up to ``config.epochs`` total epochs, validating after each.

        With ``out_dir``, keeps ``best.pt`` (highest validation Dice),
        ``last.pt`` and ``history.csv`` there. ``time_budget`` (seconds)
        stops once the run's summed epoch times reach it, resumed epochs
        included.
        """
        if not train:
            raise ValueError("training set is empty")
        if not val:
            raise ValueError("validation set is empty")
        out = Path(out_dir) if out_dir is not None else None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
        cfg = self.config
        while self.epoch < cfg.epochs:
            t0 = time.perf_counter()
            ld, lg = self.train_epoch(train)
            summary = summarize(self.evaluate(val))
            row = {"epoch": self.epoch, "loss_d": ld, "loss_g": lg,
                   **{k: summary[k] for k in HISTORY_FIELDS[3:8]}, "seconds": time.perf_counter() - t0}
            self.history.append(row)
            log.info("epoch %d loss_d %.4f loss_g %.4f dice %.4f hd %.2f (%.0fs)",
                     self.epoch, ld, lg, row["dice"], row["hd"], row["seconds"])
            improved = row["dice"] > self.best_dice
            if improved:
                self.best_dice = row["dice"]
            if out is not None:
                if improved:
                    self.save(out / "best.pt")
                self.save(out / "last.pt")
                write_history(out / "history.csv", self.history)
            if self._reached_target():
                log.info("validation targets reached at epoch %d", self.epoch)
                break
            if time_budget is not None and self.elapsed() >= time_budget:
                log.info("time budget spent at epoch %d", self.epoch)
                break
        if out is not None:
            if not (out / "best.pt").exists():
                self.save(out / "best.pt")
            self.save(out / "last.pt")
            write_history(out / "history.csv", self.history)
        return self.history

    def _reached_target(self):
        cfg = self.config
        if cfg.target_dice <= 0 or not self.history:
            return False
        best = self.best_row()
        return best["dice"] >= cfg.target_dice and (cfg.target_hd <= 0 or best["hd"] <= cfg.target_hd)

    def elapsed(self) -> float:
        return sum(r["seconds"] for r in self.history)

    def best_row(self) -> dict | None:
        return max(self.history, key=lambda r: r["dice"]) if self.history else None

    # -- checkpoints ------------------------------------------------------

    def state_dict(self) -> dict:
        return {
            "format_version": CHECKPOINT_VERSION,
            "epoch": self.epoch,
            "step": self.step,
            "config": self.config.to_dict(),
            "generator": self.generator.state_dict(),
            "discriminator": self.discriminator.state_dict(),
            "opt_g": self.opt_g.state_dict(),
            "opt_d": self.opt_d.state_dict(),
            "history": self.history,
            "best_dice": self.best_dice,
        }

    def save(self, path):
        torch.save(self.state_dict(), path)

    @classmethod
    def load(cls, path, **overrides) -> Trainer:
        state = torch.load(path, map_location="cpu", weights_only=False)
        version = state.get("format_version")
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint format version {version}")
        config = TrainConfig.from_dict({**state["config"], **overrides})
        # weights come from the checkpoint, not from the pretrained archive
        trainer = cls(config.replace(pretrained_dcm=None))
        trainer.config = config
        trainer.generator.load_state_dict(state["generator"])
        trainer.discriminator.load_state_dict(state["discriminator"])
        trainer.opt_g.load_state_dict(state["opt_g"])
        trainer.opt_d.load_state_dict(state["opt_d"])
        trainer.epoch = state["epoch"]
        trainer.step = state["step"]
        trainer.history = list(state["history"])
        trainer.best_dice = state["best_dice"]
        return trainer


def write_history(path, history: list[dict]):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=HISTORY_FIELDS)
        w.writeheader()
        for row in history:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})


def train(config: TrainConfig, cases, out_dir=None) -> tuple[Trainer, list[dict]]:
    """Split ``cases`` (id, Volume, SegMask) and run :meth:`Trainer.fit`."""
    if not cases:
        raise ValueError("dataset is empty")
    tr, va = split_cases(cases, config.val_fraction)
    shape = config.input_shape
    train_samples = [prepare_sample(v, m, shape, cid) for cid, v, m in tr]
    val_samples = [prepare_sample(v, m, shape, cid) for cid, v, m in va]
    trainer = Trainer(config)
    history = trainer.fit(train_samples, val_samples, out_dir)
    return trainer, history


# ---------------------------------------------------------------------------
# ablations

ABLATIONS = {
    "full": {},
    "no_dcm": {"dcm": False},
    "no_scam": {"scam": False},
    "no_eem": {"eem": False},
    "ch8": {"channels": (8, 16, 32, 64)},
    "ch16": {"channels": (16, 32, 64, 128)},
    "ch32": {"channels": (32, 64, 128, 256)},
}
ABLATION_FIELDS = ("name", "dice", "jaccard", "hd", "precision", "recall", "params", "params_mb", "beta")


def run_ablation(config: TrainConfig, cases, toggle_sets=("full", "no_dcm", "no_scam", "no_eem"), out_dir=None):
    """Train and validate one model per toggle set under a shared seed.

    Each row reports the validation metrics of the best epoch plus the
    generator parameter count (and its float32 size in MiB).
    """
    tr, va = split_cases(cases, config.val_fraction)
    shape = config.input_shape
    train_samples = [prepare_sample(v, m, shape, cid) for cid, v, m in tr]
    val_samples = [prepare_sample(v, m, shape, cid) for cid, v, m in va]
    rows = []
    for name in toggle_sets:
        if name not in ABLATIONS:
            raise ValueError(f"unknown toggle set {name!r}; choose from {', '.join(ABLATIONS)}")
        cfg = config.replace(**ABLATIONS[name])
        trainer = Trainer(cfg)
        run_dir = Path(out_dir) / name if out_dir is not None else None
        trainer.fit(train_samples, val_samples, run_dir)
        best = trainer.best_row()
        if best is None:
            best = summarize(trainer.evaluate(val_samples))
        n = count_parameters(trainer.generator)
        rows.append({
            "name": name, **{k: best[k] for k in ("dice", "jaccard", "hd", "precision", "recall")},
            "params": n, "params_mb": n * 4 / 2**20, "beta": trainer.weights.beta,
        })
    if out_dir is not None:
        write_ablation_table(Path(out_dir) / "ablation.csv", rows)
    return rows


def write_ablation_table(path, rows):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=ABLATION_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.4f}" if isinstance(v, float) else v) for k, v in r.items()})


def predict_volume(trainer: Trainer, volume: Volume, with_edge=False):
    """Segmentation (and optionally edge) probabilities on the volume's own grid."""
    shape = trainer.config.input_shape
    v = resample(volume, shape, "trilinear") if volume.shape != tuple(shape) else volume
    x = torch.from_numpy(normalize(v).values)[None, None]
    trainer.generator.eval()
    with torch.no_grad():
        seg, edge = trainer.generator(x, with_edge=with_edge)
    outs = [seg] + ([edge] if with_edge and edge is not None else [])
    outs = [torch.nn.functional.interpolate(o, size=volume.shape, mode="trilinear", align_corners=False)
            if volume.shape != tuple(shape) else o for o in outs]
    probs = [o[0, 0].numpy() for o in outs]
    return (probs[0], probs[1] if len(probs) > 1 else None) if with_edge else probs[0]
