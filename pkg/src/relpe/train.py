"""Training loop, metrics logging, and evaluation.

Per-step randomness (batch choice, dropout) is derived from (seed, step), so
training is a pure function of the run config and resuming from a checkpoint
reproduces an uninterrupted run.
"""

from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, load_manifest, load_optimizer_state, save_checkpoint
from .config import RunConfig
from .data import PretrainExample
from .encoder import EncoderModel, pretrain_loss
from .optim import lr_at_step, make_optimizer, training_step
from .tensor import Tensor


class TrainingDiverged(RuntimeError):
    pass


def write_metrics_header(fh, config: RunConfig):
    fh.write(json.dumps({"type": "header", "run_config": config.to_dict(),
                         "seed": config.seed}) + "\n")


class Trainer:
    def __init__(self, config: RunConfig, examples: list[PretrainExample]):
        if not examples:
            raise ValueError("no training examples")
        self.config = config
        self.examples = examples
        self.model = EncoderModel(config.model, seed=config.seed)
        self.params = self.model.parameters()
        self.optimizer = make_optimizer(config.optimizer,
                                        weight_decay=config.weight_decay,
                                        use_exclusion_list=config.use_exclusion_list)
        self.step = 0

    def _batch_for_step(self, t: int) -> list[PretrainExample]:
        rng = np.random.default_rng([self.config.seed, 1, t])
        idx = rng.integers(len(self.examples), size=self.config.batch_size)
        return [self.examples[i] for i in idx]

    def _loss_fn_for_step(self, t: int):
        batch = self._batch_for_step(t)
        dropout_active = (self.config.model.hidden_dropout > 0
                          or self.config.model.attn_dropout > 0)

        def loss_fn():
            rng = (np.random.default_rng([self.config.seed, 2, t])
                   if dropout_active else None)
            total = Tensor(0.0)
            agg = {"loss": 0.0, "mlm_loss": 0.0, "nsp_loss": 0.0,
                   "mlm_accuracy": 0.0, "num_predictions": 0, "nsp_correct": 0.0}
            n_with_pred = 0
            for ex in batch:
                out = self.model.pretrain_forward(ex, rng=rng)
                loss, metrics = pretrain_loss(out, ex)
                total = total + loss
                for key in ("loss", "mlm_loss", "nsp_loss", "nsp_correct"):
                    agg[key] += metrics[key]
                agg["num_predictions"] += metrics["num_predictions"]
                if metrics["num_predictions"]:
                    agg["mlm_accuracy"] += metrics["mlm_accuracy"]
                    n_with_pred += 1
            b = len(batch)
            total = total / float(b)
            for key in ("loss", "mlm_loss", "nsp_loss", "nsp_correct"):
                agg[key] /= b
            agg["mlm_accuracy"] = (agg["mlm_accuracy"] / n_with_pred
                                   if n_with_pred else float("nan"))
            return total, agg

        return loss_fn

    def run_step(self, t: int):
        """Execute training step t (1-based); returns the metrics record."""
        lr = lr_at_step(self.config.schedule, t)
        loss_fn = self._loss_fn_for_step(t)
        start = time.monotonic()
        metrics, skipped = training_step(self.config.precision, loss_fn,
                                         self.params, self.optimizer, lr)
        if self.config.precision.mode == "full" and not np.isfinite(metrics["loss"]):
            raise TrainingDiverged(f"non-finite loss at step {t}: {metrics['loss']}")
        self.step = t
        record = {"step": t, **{k: metrics[k] for k in
                                ("loss", "mlm_loss", "nsp_loss", "mlm_accuracy")},
                  "lr": lr, "skipped": skipped,
                  "wall_time": time.monotonic() - start}
        return record

    def save(self, path, metrics=None):
        save_checkpoint(path, self.params, self.optimizer,
                        self.config.to_dict(), self.step, metrics)

    def resume(self, checkpoint_path):
        manifest = load_manifest(checkpoint_path)
        load_checkpoint(checkpoint_path, self.params)
        load_optimizer_state(checkpoint_path, self.params, self.optimizer)
        self.step = int(manifest["step"])
        return self.step

    def train(self, out_dir=None, resume_from=None, log_fh=None):
        """Run from the current step to config.total_steps, logging every step."""
        config = self.config
        out_dir = Path(out_dir if out_dir is not None else config.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        start_step = self.resume(resume_from) if resume_from else 0

        own_log = log_fh is None
        if own_log:
            log_fh = open(out_dir / "metrics.jsonl", "w", encoding="utf-8")
        try:
            write_metrics_header(log_fh, config)
            last = None
            if config.total_steps == 0:
                self.save(out_dir / "checkpoint-init")
            for t in range(start_step + 1, config.total_steps + 1):
                last = self.run_step(t)
                log_fh.write(json.dumps(last) + "\n")
                if config.checkpoint_every and t % config.checkpoint_every == 0 \
                        and t != config.total_steps:
                    self.save(out_dir / f"checkpoint-{t}", metrics=last)
            if config.total_steps > 0:
                self.save(out_dir / "checkpoint-final", metrics=last)
            return last
        finally:
            if own_log:
                log_fh.close()


def evaluate(model: EncoderModel, examples: list[PretrainExample]) -> dict:
    """MLM loss/accuracy and NSP accuracy over an example set."""
    n_pred = 0
    mlm_loss_sum = 0.0
    mlm_correct = 0.0
    nsp_correct = 0
    for ex in examples:
        out = model.pretrain_forward(ex)
        _, metrics = pretrain_loss(out, ex)
        k = metrics["num_predictions"]
        n_pred += k
        if k:
            mlm_loss_sum += metrics["mlm_loss"] * k
            mlm_correct += metrics["mlm_accuracy"] * k
        nsp_correct += int(metrics["nsp_correct"])
    n = len(examples)
    return {
        "num_examples": n,
        "num_predictions": n_pred,
        "mlm_loss": mlm_loss_sum / n_pred if n_pred else 0.0,
        "mlm_accuracy": mlm_correct / n_pred if n_pred else 0.0,
        "nsp_accuracy": nsp_correct / n if n else 0.0,
    }
