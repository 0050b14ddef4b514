"""Alternating min-max training.

The schedule assigns each (epoch, batch) slot to one side: the
discriminator phase minimizes the weighted adversarial loss over the
classifier bank with the extractor frozen (no-graph forward, batch-norm
buffers untouched); the extractor phase minimizes the combined objective
with the bank frozen. The baseline ablation executes only extractor slots,
so every ablation performs the same number of extractor updates.

All randomness flows through one Philox stream owned by the train state;
checkpoints capture parameters, optimizer velocities, the stream state and
the log so far, which makes interrupted-and-resumed runs bit-identical to
uninterrupted ones.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import Dataset, PKBatchSpec, PKLoader
from .errors import ConfigError, NumericError
from .evaluation import EvalResult, evaluate_model
from .losses import (
    LossConfig,
    LossReport,
    adversarial_weighted,
    cross_entropy_mean,
    resolve_weights,
    total_objective,
    triplet_batch_hard,
)
from .model import (
    BackboneConfig,
    DomainClassifierBank,
    PartStripeExtractor,
    read_container,
    write_container,
)
from .rng import derive_rng, new_rng, restore_rng, rng_state
from .tensor import SGDMomentum

ALTERNATIONS = ("per-epoch", "per-batch")


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    ablation: str = "shallow+weighting"
    epochs_per_side: int = 35
    alternation: str = "per-epoch"
    lr_heads: float = 0.01
    lr_backbone: float = 0.001
    momentum: float = 0.9
    single_lr: float | None = None
    triplet_margin: float = 0.3
    p_identities: int = 8
    k_samples: int = 4
    flip_p: float = 0.5
    erase_p: float = 0.2
    eval_every: int = 0          # epochs between mid-run evaluations; 0 = final only
    checkpoint_every: int = 1    # epochs between checkpoint snapshots

    def __post_init__(self):
        if self.epochs_per_side < 1:
            raise ConfigError(f"epochs_per_side must be >= 1, got {self.epochs_per_side}")
        if self.alternation not in ALTERNATIONS:
            raise ConfigError(f"alternation must be one of {ALTERNATIONS}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0,1), got {self.momentum}")

    @property
    def total_epochs(self) -> int:
        return 2 * self.epochs_per_side

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    checkpoint_path: Path | None
    log_path: Path | None
    rows: list[dict]
    final_eval: EvalResult | None


def _mean(vals: list[float]) -> float | None:
    return float(np.mean(vals)) if vals else None


class Trainer:
    def __init__(
        self,
        model: PartStripeExtractor,
        bank: DomainClassifierBank,
        dataset: Dataset,
        config: TrainConfig,
        out_dir=None,
    ):
        self.model = model
        self.bank = bank
        self.dataset = dataset
        self.config = config
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.loss_config = LossConfig.from_ablation(
            config.ablation, model.config.num_identities, config.triplet_margin
        )
        spec = PKBatchSpec(config.p_identities, config.k_samples, config.flip_p, config.erase_p)
        self.loader = PKLoader(dataset, spec)
        if self.loader.num_classes != model.config.num_identities:
            raise ConfigError(
                f"model expects {model.config.num_identities} identities, "
                f"dataset trains {self.loader.num_classes}"
            )
        lr_b = config.single_lr if config.single_lr is not None else config.lr_backbone
        lr_h = config.single_lr if config.single_lr is not None else config.lr_heads
        self.opt_extractor = SGDMomentum(
            [(model.backbone_parameters(), lr_b), (model.head_parameters(), lr_h)],
            momentum=config.momentum,
        )
        self.opt_discriminator = SGDMomentum(
            [(bank.parameters(), lr_h)], momentum=config.momentum
        )
        self.rng = derive_rng(config.seed, 2)
        self.epoch = 0
        self.rows: list[dict] = []

    # -- single steps --

    def _forward_frozen(self, images, modalities):
        with T.no_grad():
            return self.model.forward_batch(images, modalities, train_mode=True, update_stats=False)

    def discriminator_step(self, images, labels, modalities) -> dict:
        """One update of the classifier bank on frozen extractor features."""
        record = self._forward_frozen(images, modalities)
        weights = resolve_weights(record, self.loss_config)
        raw_desc = T.concat(record.parts, axis=1) if self.loss_config.vanilla_mode else None
        adv, breakdown = adversarial_weighted(
            record, self.bank, weights,
            levels=self.loss_config.adv_levels,
            include_descriptor=self.loss_config.vanilla_mode,
            raw_descriptor=raw_desc,
        )
        # Objective values come free from the same forward; snapshot them
        # before the update so every epoch row carries all active terms.
        with T.no_grad():
            xent_vals = [cross_entropy_mean(lg, labels).item() for lg in record.logits]
            triplet_val = triplet_batch_hard(
                T.concat(record.parts, axis=1), labels, self.loss_config.triplet_margin
            ).item()
        frag = {"adv_" + k: v for k, v in breakdown.items()}
        frag.update({f"xent_{i + 1}": v for i, v in enumerate(xent_vals)})
        frag["triplet"] = triplet_val
        frag["total"] = sum(xent_vals) + triplet_val - sum(breakdown.values())
        self._abort_on_nan(frag)
        adv.backward()
        self.opt_discriminator.step()
        return frag

    def extractor_step(self, images, labels, modalities) -> LossReport:
        """One update of backbone + heads on the combined objective."""
        self.bank.set_trainable(False)
        try:
            record = self.model.forward_batch(images, modalities, train_mode=True)
            total, report = total_objective(record, labels, self.bank, self.loss_config)
            self._abort_on_nan(self._report_terms(report))
            total.backward()
            self.opt_extractor.step()
        finally:
            self.bank.set_trainable(True)
        return report

    @staticmethod
    def _report_terms(report: LossReport) -> dict:
        terms = {f"xent_{i + 1}": v for i, v in enumerate(report.xent_per_part)}
        terms["triplet"] = report.triplet
        terms.update({"adv_" + k: v for k, v in report.adv_per_level.items()})
        terms["total"] = report.total
        return terms

    def _abort_on_nan(self, terms: dict) -> None:
        for name, value in terms.items():
            if not np.isfinite(value):
                raise NumericError(
                    f"non-finite loss term {name}={value} at epoch {self.epoch}"
                )

    # -- schedule --

    def _slot_phases(self, epoch: int, n_batches: int) -> list[str]:
        if self.config.alternation == "per-epoch":
            phase = "discriminator" if epoch % 2 == 0 else "extractor"
            return [phase] * n_batches
        return ["discriminator" if i % 2 == 0 else "extractor" for i in range(n_batches)]

    def run(self) -> TrainResult:
        cfg = self.config
        n_batches = self.loader.batches_per_epoch()
        final_eval = None
        while self.epoch < cfg.total_epochs:
            epoch = self.epoch
            phases = self._slot_phases(epoch, n_batches)
            collected: dict[str, list[float]] = {}
            ran_phase = set()
            for phase in phases:
                if phase == "discriminator" and not self.loss_config.adversarial_active:
                    continue
                images, labels, modalities = self.loader.next_batch(self.rng)
                if phase == "discriminator":
                    frag = self.discriminator_step(images, labels, modalities)
                else:
                    frag = self._report_terms(self.extractor_step(images, labels, modalities))
                ran_phase.add(phase)
                for key, val in frag.items():
                    collected.setdefault(key, []).append(val)

            row: dict = {"epoch": epoch, "phase": "+".join(sorted(ran_phase)) or "skipped"}
            for key in self._log_value_columns():
                row[key] = _mean(collected.get(key, []))
            is_last = epoch == cfg.total_epochs - 1
            if is_last or (cfg.eval_every and (epoch + 1) % cfg.eval_every == 0):
                result = evaluate_model(self.model, self.dataset)
                row["eval_rank1"] = result.rank1
                row["eval_map"] = result.mean_ap
                if is_last:
                    final_eval = result
            self.rows.append(row)
            self.epoch += 1
            if self.out_dir and not is_last and (
                cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0
            ):
                self.save_checkpoint(self.out_dir / "train.ckpt")

        log_path = ckpt_path = None
        if self.out_dir:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            ckpt_path = self.out_dir / "train.ckpt"
            self.save_checkpoint(ckpt_path)
            log_path = self.out_dir / "train_log.csv"
            self.write_log(log_path)
        return TrainResult(ckpt_path, log_path, self.rows, final_eval)

    # -- logging --

    def _log_value_columns(self) -> list[str]:
        n = self.model.config.n_parts
        cols = [f"xent_{i + 1}" for i in range(n)] + ["triplet"]
        cols += ["adv_" + k for k in self.loss_config.adv_keys]
        cols.append("total")
        return cols

    def log_columns(self) -> list[str]:
        return ["epoch", "phase"] + self._log_value_columns() + ["eval_rank1", "eval_map"]

    def write_log(self, path) -> None:
        cols = self.log_columns()
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(cols)
            for row in self.rows:
                writer.writerow([
                    "" if row.get(c) is None else (row[c] if isinstance(row[c], (int, str)) else repr(row[c]))
                    for c in cols
                ])

    # -- checkpointing --

    def _arrays(self) -> dict[str, np.ndarray]:
        arrays: dict[str, np.ndarray] = {}
        for name, p in self.model.named_parameters().items():
            arrays[f"model/{name}"] = p.data
        for name, b in self.model.named_buffers().items():
            arrays[f"model/{name}"] = b
        for name, p in self.bank.named_parameters().items():
            arrays[f"bank/{name}"] = p.data
        for i, v in enumerate(self.opt_extractor.state_arrays()):
            arrays[f"opt_e/{i:04d}"] = v
        for i, v in enumerate(self.opt_discriminator.state_arrays()):
            arrays[f"opt_d/{i:04d}"] = v
        return arrays

    def save_checkpoint(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        config = {"model": self.model.config.to_dict(), "train": self.config.to_dict()}
        extra = {
            "epoch": self.epoch,
            "rng": rng_state(self.rng),
            "rows": self.rows,
        }
        write_container(path, config, self._arrays(), extra)

    @classmethod
    def resume(cls, path, dataset: Dataset, out_dir=None) -> "Trainer":
        config, arrays, extra = read_container(path)
        model_cfg = BackboneConfig.from_dict(config["model"])
        train_cfg = TrainConfig(**config["train"])
        scratch = new_rng(0)
        model = PartStripeExtractor(model_cfg, scratch)
        bank = DomainClassifierBank(model_cfg, scratch)
        trainer = cls(model, bank, dataset, train_cfg, out_dir=out_dir)
        targets: dict[str, np.ndarray] = {}
        for name, p in model.named_parameters().items():
            targets[f"model/{name}"] = p.data
        for name, b in model.named_buffers().items():
            targets[f"model/{name}"] = b
        for name, p in bank.named_parameters().items():
            targets[f"bank/{name}"] = p.data
        for name, dst in targets.items():
            dst[...] = arrays[name]
        trainer.opt_extractor.load_state_arrays(
            [arrays[k] for k in sorted(arrays) if k.startswith("opt_e/")]
        )
        trainer.opt_discriminator.load_state_arrays(
            [arrays[k] for k in sorted(arrays) if k.startswith("opt_d/")]
        )
        trainer.rng = restore_rng(extra["rng"])
        trainer.epoch = extra["epoch"]
        trainer.rows = extra["rows"]
        return trainer


def build_trainer(
    dataset: Dataset,
    config: TrainConfig,
    out_dir=None,
    **backbone_overrides,
) -> Trainer:
    """Construct model, bank and trainer for a dataset with fresh seeded init."""
    n_classes = len({s.identity for s in dataset.train})
    model_cfg = BackboneConfig(num_identities=n_classes, **backbone_overrides)
    model = PartStripeExtractor(model_cfg, derive_rng(config.seed, 0))
    bank = DomainClassifierBank(model_cfg, derive_rng(config.seed, 1))
    return Trainer(model, bank, dataset, config, out_dir=out_dir)
