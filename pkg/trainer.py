"""
Joint training loop.

Warm-up epochs train the OVA head with mixup plus the bi-level contrastive loss with
all sample weights at 1. Every later epoch starts by snapshotting an embedding bank,
identifying clean / close / open samples and (once) initializing the prototypes from
clean class means, then optimizes the joint objective with per-subset routing.
"""

import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from tqdm import tqdm

from config import ExperimentConfig
from errors import ConfigurationError, TrainingAborted
from evaluate import MetricsReport, evaluate_model, selection_audit, write_summary
from identify import (SamplePartition, Subset, all_clean_partition, build_bank, identify_samples,
                      init_prototypes, write_identification_report)
from losses import (LossBreakdown, bcl_loss, consistency_loss, mixup_loss, ova_loss, proto_loss, pu_loss,
                    total_loss)
from nets import AugmentationPolicy, ModelBundle, build_model, load_checkpoint, make_views, mixup_batch, \
    save_checkpoint
from noisegen import LabeledDataset, NoiseSpec, build_task, load_dataset, load_source_npz, synth_gaussian_source

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.jsonl"
SUMMARY_FILE = "summary.json"
LAST_CHECKPOINT = "checkpoint_last.pt"
LOCK_FILE = ".lock"


def make_dataset(config: ExperimentConfig) -> LabeledDataset:
    """Load the configured dataset, or build the noisy task from an external or synthetic clean source"""
    if config.dataset_path:
        dataset = load_dataset(config.dataset_path)
        if dataset.num_classes != config.known_classes:
            logger.info("Dataset defines C=%d known classes; known_classes=%d from config is unused",
                        dataset.num_classes, config.known_classes)
        return dataset
    if config.source_path:
        source = load_source_npz(config.source_path)
        logger.info("Loaded clean source %s: %d samples, C_total=%d", config.source_path, len(source),
                    source.c_total)
    else:
        source = synth_gaussian_source(config.c_total, config.dim, config.per_class, config.separation,
                                       config.seed, test_fraction=config.test_fraction)
    if config.known_classes > source.c_total:
        raise ConfigurationError(f"known_classes ({config.known_classes}) exceeds the source's {source.c_total} classes")
    spec = NoiseSpec(known_classes=config.known_classes, noise_type=config.noise_type,
                     noise_rate=config.noise_rate, seed=config.seed)
    mode = "lcnd" if config.known_classes == source.c_total else config.task_mode
    return build_task(source, spec, mode=mode, open_train_count=config.open_train_count)


def cosine_lr(lr0: float, epoch: int, total_epochs: int) -> float:
    """lr0 * 0.5 * (1 + cos(pi * epoch / total_epochs)), epoch counted from 0"""
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))


class RunLock:
    """Exclusive lockfile so only one process writes a run directory"""

    def __init__(self, directory: Path):
        self.path = Path(directory) / LOCK_FILE
        self._held = False

    def __enter__(self) -> "RunLock":
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConfigurationError(f"Run directory is locked by another process: {self.path}") from None
        with os.fdopen(fd, "w") as f:
            f.write(str(os.getpid()))
        self._held = True
        return self

    def __exit__(self, *exc):
        if self._held:
            self.path.unlink(missing_ok=True)
            self._held = False


@dataclass
class TrainState:
    """Mutable training state; the loop is its only writer"""
    epoch: int
    model: ModelBundle
    optimizer: torch.optim.Optimizer
    scheduler: torch.optim.lr_scheduler.LambdaLR
    partition: SamplePartition
    seed: int
    history: List[MetricsReport] = field(default_factory=list)
    batch_log: List[Dict[str, Any]] = field(default_factory=list)

    @property
    def lr(self) -> float:
        return self.optimizer.param_groups[0]["lr"]


class Trainer:
    """Runs warm-up, identification and joint epochs over one noisy task"""

    def __init__(self, config: ExperimentConfig, dataset: LabeledDataset, output_dir: Optional[Path] = None):
        self.config = config
        self.hp = config.hyper
        self.device = torch.device(config.device)
        self.output_dir = Path(output_dir) if output_dir is not None else None
        self.dataset = dataset
        self.train_set = dataset.train()
        self.test_set = dataset.test()
        if len(self.train_set) < 2:
            raise ConfigurationError("Training needs at least two samples")

        self.x_train = torch.as_tensor(self.train_set.features, dtype=torch.float32, device=self.device)
        self.y_train = torch.as_tensor(self.train_set.given_label, dtype=torch.long, device=self.device)
        self.policy = AugmentationPolicy.for_features(self.train_set.features)

        model = build_model(self.train_set.feature_shape, dataset.num_classes, proj_dim=self.hp.proj_dim,
                            hidden_dim=self.hp.hidden_dim, tau=self.hp.tau, seed=config.seed).to(self.device)
        others = [p for name, p in model.named_parameters() if name != "prototypes"]
        optimizer = torch.optim.SGD(
            [{"params": others, "weight_decay": self.hp.weight_decay},
             {"params": [model.prototypes], "weight_decay": 0.0}],
            lr=self.hp.lr, momentum=self.hp.momentum,
        )
        total = self.hp.total_epochs
        scheduler = torch.optim.lr_scheduler.LambdaLR(
            optimizer, lambda e: 0.5 * (1.0 + math.cos(math.pi * e / total))
        )
        self.state = TrainState(epoch=0, model=model, optimizer=optimizer, scheduler=scheduler,
                                partition=all_clean_partition(len(self.train_set)), seed=config.seed)

    @property
    def model(self) -> ModelBundle:
        return self.state.model

    def _epoch_rngs(self, epoch: int) -> Tuple[np.random.Generator, torch.Generator]:
        # derived from (seed, epoch) alone so a resumed run replays the same draws
        rng = np.random.default_rng([self.config.seed, epoch])
        gen = torch.Generator().manual_seed(int(rng.integers(2 ** 62)))
        return rng, gen

    def _batches(self, rng: np.random.Generator):
        order = rng.permutation(len(self.train_set))
        for start in range(0, len(order), self.hp.batch_size):
            yield torch.as_tensor(order[start:start + self.hp.batch_size], device=self.device)

    def _step(self, loss: torch.Tensor, renormalize: bool):
        if not loss.requires_grad:
            return
        self.state.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.state.optimizer.step()
        if renormalize:
            self.model.renormalize_prototypes()

    def _abort(self, epoch: int, batch: int, record: Dict[str, Any]):
        dump_path = None
        if self.output_dir is not None:
            dump_path = self.output_dir / "abort_dump.json"
            dump_path.write_text(json.dumps({"epoch": epoch, "batch": batch, **record}, indent=2, default=str),
                                 encoding="utf-8")
        raise TrainingAborted(f"Non-finite loss at epoch {epoch}, batch {batch}: {record.get('losses')}",
                              dump_path)

    def _log_batch(self, epoch: int, batch: int, breakdown: Dict[str, float], counts: Dict[str, int]):
        record = {"epoch": epoch, "batch": batch, **counts, "losses": breakdown}
        self.state.batch_log.append(record)
        if not all(math.isfinite(v) for v in breakdown.values()):
            self._abort(epoch, batch, record)

    # ------------------------------------------------------------------
    # epochs
    # ------------------------------------------------------------------

    def warmup_epoch(self) -> TrainState:
        """Mixup OVA + BCL with all weights 1; prototypes untouched"""
        epoch = self.state.epoch + 1
        rng, gen = self._epoch_rngs(epoch)
        self.model.train()
        self.state.batch_log = []
        for b, idx in enumerate(self._batches(rng)):
            x, y = self.x_train[idx], self.y_train[idx]
            n = len(idx)
            weak, strong = make_views(self.policy, x, generator=gen)
            draw = mixup_batch(weak, self.hp.mixup_alpha, rng=rng)
            out = self.model(torch.cat((draw.mixed, weak, strong)))
            out_mix, out_w, out_s = out[:n], out[n:2 * n], out[2 * n:]

            l_ova = mixup_loss(lambda o, t: ova_loss(o.ova_probs, t), out_mix, y, draw.partner(y), draw.lam)
            l_bcl = bcl_loss(out_w.z, out_s.z, y, torch.ones(n, device=self.device), self.hp.tau)
            loss = l_ova + l_bcl
            zero = loss.new_zeros(())
            breakdown = LossBreakdown(l_proto=zero, l_ova=l_ova, l_pu=zero, l_con=zero, l_bcl=l_bcl, total=loss)
            self._log_batch(epoch, b, breakdown.as_dict(), {"n_clean": n, "n_close": 0, "n_open": 0})
            self._step(loss, renormalize=False)
        return self.state

    def refresh_partition(self, epoch: int) -> SamplePartition:
        """Build the bank, identify subsets and initialize prototypes on the first joint epoch"""
        bank = build_bank(self.model, self.x_train, self.y_train, epoch=epoch,
                          batch_size=self.config.eval_batch_size, device=str(self.device))
        partition = identify_samples(bank, k=self.hp.k_neighbors, tau=self.hp.tau, K=self.hp.k_top,
                                     alpha_id=self.hp.alpha_id, alpha_ood=self.hp.alpha_ood)
        if not self.model.has_prototypes:
            logger.info("Initializing prototypes from %d clean samples", len(partition.clean_idx))
            self.model.set_prototypes(init_prototypes(bank, partition.clean_idx, self.dataset.num_classes,
                                                      seed=self.config.seed).to(self.device))
        self.state.partition = partition
        if self.output_dir is not None:
            write_identification_report(self.output_dir / "identify" / f"epoch_{epoch:03d}.jsonl",
                                        partition, self.train_set.noise_tag)
        return partition

    def main_epoch(self) -> TrainState:
        """Joint objective with clean -> OVA+Proto, close -> PU, clean+close -> Con, all -> BCL"""
        cfg, hp = self.config, self.hp
        epoch = self.state.epoch + 1
        partition = self.refresh_partition(epoch)
        membership = torch.as_tensor(partition.membership(), device=self.device)
        weights = torch.as_tensor(partition.weights, dtype=torch.float32, device=self.device)
        rng, gen = self._epoch_rngs(epoch)
        self.model.train()
        self.state.batch_log = []
        for b, idx in enumerate(self._batches(rng)):
            x, y = self.x_train[idx], self.y_train[idx]
            member, w = membership[idx], weights[idx]
            n = len(idx)
            weak, strong = make_views(self.policy, x, generator=gen)
            out = self.model(torch.cat((weak, strong)))
            out_w, out_s = out[:n], out[n:]

            clean = torch.nonzero(member == Subset.CLEAN).flatten()
            close = torch.nonzero(member == Subset.CLOSE).flatten()
            draw_clean = mixup_batch(weak[clean], hp.mixup_alpha, rng=rng) if len(clean) else None
            draw_close = mixup_batch(weak[close], hp.mixup_alpha, rng=rng) if len(close) and cfg.enable_pu else None
            mixed = [d.mixed for d in (draw_clean, draw_close) if d is not None]
            out_mix = self.model(torch.cat(mixed)) if mixed else None

            ova_full = proto_full = pu_full = None
            if draw_clean is not None:
                out_c, y_c = out_mix[:len(clean)], y[clean]
                ova_c = mixup_loss(lambda o, t: ova_loss(o.ova_probs, t, reduction="none"),
                                   out_c, y_c, draw_clean.partner(y_c), draw_clean.lam)
                proto_c = mixup_loss(lambda o, t: proto_loss(o.z, t, self.model.prototypes, hp.tau, reduction="none"),
                                     out_c, y_c, draw_clean.partner(y_c), draw_clean.lam)
                ova_full = ova_c.new_zeros(n).index_copy(0, clean, ova_c)
                proto_full = proto_c.new_zeros(n).index_copy(0, clean, proto_c)
            if draw_close is not None:
                out_o = out_mix[len(clean) if draw_clean is not None else 0:]
                ybar = 0.5 * (torch.softmax(out_w.proto_logits[close], -1) + torch.softmax(out_s.proto_logits[close], -1))
                ybar, w_o = ybar.detach(), w[close]
                pu_o = mixup_loss(lambda o, t: pu_loss(o.proto_logits, t[0], t[1], hp.sharpen_t, reduction="none"),
                                  out_o, (ybar, w_o), (draw_close.partner(ybar), draw_close.partner(w_o)),
                                  draw_close.lam)
                pu_full = pu_o.new_zeros(n).index_copy(0, close, pu_o)

            con = consistency_loss(out_s.ova_probs, out_w.ova_probs, reduction="none") if cfg.enable_con else None
            bcl = bcl_loss(out_w.z, out_s.z, y, w, hp.tau) if cfg.enable_bcl else None
            breakdown = total_loss(member, ova_full, proto_full, pu_full, con, bcl,
                                   lambda_con=hp.lambda_con if cfg.enable_con else 0.0,
                                   lambda_bcl=hp.lambda_bcl if cfg.enable_bcl else 0.0,
                                   lambda_proto=hp.lambda_proto)
            counts = {"n_clean": len(clean), "n_close": len(close), "n_open": n - len(clean) - len(close)}
            self._log_batch(epoch, b, breakdown.as_dict(), counts)
            self._step(breakdown.total, renormalize=True)
        return self.state

    def ce_epoch(self) -> TrainState:
        """Cross-entropy baseline on given labels (weak view), same backbone and schedule"""
        epoch = self.state.epoch + 1
        rng, gen = self._epoch_rngs(epoch)
        self.model.train()
        self.state.batch_log = []
        for b, idx in enumerate(self._batches(rng)):
            x, y = self.x_train[idx], self.y_train[idx]
            weak, _ = make_views(self.policy, x, generator=gen)
            loss = F.cross_entropy(self.model(weak).ova_logits, y)
            self._log_batch(epoch, b, {"l_ce": float(loss.detach()), "total": float(loss.detach())},
                            {"n_clean": len(idx), "n_close": 0, "n_open": 0})
            self._step(loss, renormalize=False)
        return self.state

    def phase(self) -> str:
        if self.config.method == "ce":
            return "ce"
        return "warmup" if self.state.epoch < self.hp.warmup_epochs else "main"

    def train_epoch(self) -> MetricsReport:
        """Run the next epoch, evaluate on the test split and advance the schedule"""
        phase = self.phase()
        lr = self.state.lr
        if phase == "ce":
            self.ce_epoch()
        elif phase == "warmup":
            self.warmup_epoch()
        else:
            self.main_epoch()
        report = self.evaluate(phase, lr)
        self.state.scheduler.step()
        self.state.epoch += 1
        self.state.history.append(report)
        return report

    def evaluate(self, phase: str, lr: float) -> MetricsReport:
        metrics = evaluate_model(self.model, self.test_set, batch_size=self.config.eval_batch_size,
                                 device=str(self.device), method=self.config.method)
        losses: Dict[str, List[float]] = {}
        for record in self.state.batch_log:
            for name, value in record["losses"].items():
                losses.setdefault(name, []).append(value)
        report = MetricsReport(epoch=self.state.epoch + 1, phase=phase, lr=lr,
                               losses={name: float(np.mean(v)) for name, v in losses.items()}, **metrics)
        if phase == "main":
            for key, value in selection_audit(self.state.partition, self.train_set.noise_tag).items():
                setattr(report, key, value)
            counts = self.state.partition.counts()
            report.n_clean, report.n_close, report.n_open = counts["n_clean"], counts["n_close"], counts["n_open"]
        return report

    # ------------------------------------------------------------------
    # checkpoints
    # ------------------------------------------------------------------

    def save(self, path: Union[str, Path]) -> Path:
        return save_checkpoint(path, self.model, self.state.epoch, self.config.to_flat_dict(),
                               optimizer=self.state.optimizer, scheduler=self.state.scheduler)

    def resume(self, path: Union[str, Path]) -> int:
        _, state = load_checkpoint(path, self.model, self.state.optimizer, self.state.scheduler,
                                   map_location=str(self.device))
        self.state.epoch = int(state["epoch"])
        logger.info("Resumed from %s at epoch %d", path, self.state.epoch)
        return self.state.epoch


@dataclass
class RunResult:
    output_dir: Path
    checkpoint: Path
    history: List[MetricsReport]
    summary: Dict[str, Any]


def _truncate_metrics(path: Path, epoch: int):
    """Drop metric records past a resumed checkpoint's epoch"""
    if not path.exists():
        return
    kept = [line for line in path.read_text(encoding="utf-8").splitlines()
            if line and json.loads(line)["epoch"] <= epoch]
    path.write_text("".join(line + "\n" for line in kept), encoding="utf-8")


def run(config: ExperimentConfig, dataset: Optional[LabeledDataset] = None,
        resume: Optional[Union[str, Path]] = None, run_name: str = "run") -> RunResult:
    """
    Train for total_epochs (warm-up first), evaluating every epoch.

    Writes config.json, metrics.jsonl, identify/epoch_XXX.jsonl, periodic and final
    checkpoints and summary.json into the output directory.
    """
    output_dir = config.resolve_output_dir(run_name)
    with RunLock(output_dir):
        config.write_echo(output_dir)
        dataset = dataset if dataset is not None else make_dataset(config)
        dataset.check_consistency()
        trainer = Trainer(config, dataset, output_dir)
        metrics_path = output_dir / METRICS_FILE
        if resume is not None:
            _truncate_metrics(metrics_path, trainer.resume(resume))
        elif metrics_path.exists():
            metrics_path.unlink()

        total = config.hyper.total_epochs
        checkpoint = output_dir / LAST_CHECKPOINT
        with tqdm(total=total, initial=trainer.state.epoch, desc="epochs", disable=not config.progress) as bar:
            while trainer.state.epoch < total:
                report = trainer.train_epoch()
                with open(metrics_path, "a", encoding="utf-8") as f:
                    f.write(report.to_json() + "\n")
                epoch = trainer.state.epoch
                if epoch % config.save_every == 0 or epoch == total:
                    trainer.save(output_dir / f"checkpoint_epoch_{epoch:03d}.pt")
                    trainer.save(checkpoint)
                bar.set_postfix(acc=report.accuracy, auroc=report.auroc)
                bar.update(1)
        if not checkpoint.exists():
            trainer.save(checkpoint)

        final = trainer.state.history[-1].to_record() if trainer.state.history else {}
        summary = {
            "final": final,
            "epochs": trainer.state.epoch,
            "method": config.method,
            "checkpoint": str(checkpoint),
            "dataset_counts": dataset.counts(),
        }
        write_summary(output_dir / SUMMARY_FILE, summary)
    return RunResult(output_dir=output_dir, checkpoint=checkpoint, history=trainer.state.history, summary=summary)
