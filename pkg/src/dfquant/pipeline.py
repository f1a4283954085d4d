"""Data-free quantization training loop.

A generator is warmed up against the frozen full-precision teacher, per-class
statistic centroids are initialized from its samples, and then every step
performs one generator update (with alignment and diversity terms), one EMA
update of the centroid bank and one distillation step of the fake-quantized
student on the same synthetic batch.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import logging
import math
import statistics
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import ExperimentConfig, with_overrides
from .data import LabeledDataset
from .losses import (DEConfig, GeneratorBatch, LossWeights, finetune_objective,
                     generator_objective_full, generator_objective_warmup)
from .modelkit.bn import BNLayerParams
from .modelkit.checkpoint import (Container, load_container, load_module_arrays, module_arrays,
                                  save_container)
from .modelkit.classifier import Classifier, forward_with_taps
from .modelkit.fakequant import FakeQuantModel, quantize_model, save_quantized
from .modelkit.generator import Generator, balanced_labels, build_generator, sample_synthetic
from .quantizer import QuantConfig
from .stats import (CentroidBank, class_batch_stats, class_diversity, default_start_layer, ema_update,
                    fisher_separability, init_centroids)

log = logging.getLogger(__name__)

CSV_COLUMNS = ("epoch", "step", "L_CE", "L_BNS", "L_FDA", "L_DE", "L_KD", "student_acc",
               "fisher_ratio", "diversity")
VARIANTS = {
    "full": {},
    "no_DE": {"loss.alpha3": 0.0},
    "no_EMA": {"fda.beta_fd": 0.0},
    "neither": {"loss.alpha3": 0.0, "fda.beta_fd": 0.0},
}


class TrainingDivergedError(RuntimeError):
    pass


class PhaseError(RuntimeError):
    pass


def derive_seed(root: int, *tags) -> int:
    text = ":".join(str(t) for t in (root, *tags))
    return int.from_bytes(hashlib.blake2b(text.encode(), digest_size=8).digest(), "little") & (2**63 - 1)


def state_hash(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for k, v in module.state_dict().items():
        h.update(k.encode())
        h.update(v.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def make_optimizer(params, lr: float) -> torch.optim.Optimizer:
    # Adam with beta1 = 0: adaptive step size, no momentum.
    return torch.optim.Adam(params, lr=lr, betas=(0.0, 0.999))


def evaluate(model: torch.nn.Module, dataset, batch_size: int = 256) -> float:
    """Top-1 accuracy. Fake-quantized models must have frozen activation ranges."""
    if isinstance(dataset, LabeledDataset):
        images, labels = dataset.images, dataset.labels
    else:
        images, labels = dataset
    if len(labels) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    if isinstance(model, FakeQuantModel) and not model.ranges_frozen:
        raise ValueError("freeze activation ranges before evaluating a fake-quantized model")
    was_training = model.training
    model.eval()
    correct = 0
    with torch.no_grad():
        for start in range(0, len(labels), batch_size):
            logits = model(images[start:start + batch_size])
            correct += int((logits.argmax(1) == labels[start:start + batch_size]).sum())
    model.train(was_training)
    return correct / len(labels)


def frozen_copy(student: FakeQuantModel) -> FakeQuantModel:
    return copy.deepcopy(student).freeze_ranges()


@dataclass
class Report:
    variant: str
    seed: int
    teacher_acc: float
    post_quant_acc: float
    final_acc: float
    warmup_fisher: float
    final_fisher: float
    warmup_diversity: float
    final_diversity: float
    rows: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def save_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load_json(cls, path) -> "Report":
        return cls(**json.loads(Path(path).read_text()))

    def metrics_csv(self) -> str:
        return metrics_csv(self.rows)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def metrics_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in CSV_COLUMNS])
    return buf.getvalue()


@dataclass
class ExperimentState:
    cfg: ExperimentConfig
    teacher: Classifier
    generator: Generator
    student: FakeQuantModel
    gen_opt: torch.optim.Optimizer
    student_opt: torch.optim.Optimizer
    bn_params: list[BNLayerParams]
    test_set: LabeledDataset
    teacher_hash: str
    teacher_acc: float
    l_st: int
    bank: CentroidBank | None = None
    step: int = 0
    epoch: int = 0
    rows: list[dict] = field(default_factory=list)
    post_quant_acc: float | None = None
    warmup_fisher: float | None = None
    warmup_diversity: float | None = None

    @property
    def weights(self) -> LossWeights:
        c = self.cfg.loss
        return LossWeights(c.alpha1, c.alpha2, c.alpha3, c.gamma)

    @property
    def de_cfg(self) -> DEConfig:
        return DEConfig(self.cfg.de.lambda_mu, self.cfg.de.lambda_sigma, derive_seed(self.cfg.seed, "de"))

    @property
    def labels(self) -> torch.Tensor:
        return balanced_labels(self.teacher.num_classes, self.cfg.schedule.batch_size)


def start_experiment(cfg: ExperimentConfig, teacher: Classifier, test_set: LabeledDataset) -> ExperimentState:
    """Quantize the teacher and build a fresh generator; nothing is trained yet."""
    teacher.eval()
    for p in teacher.parameters():
        p.requires_grad_(False)
    qcfg = QuantConfig(cfg.quant.weight_bits, cfg.quant.act_bits, range_momentum=cfg.quant.range_momentum)
    student = quantize_model(teacher, qcfg)
    h, w = test_set.images.shape[2:]
    gen = build_generator(teacher.num_classes, seed=derive_seed(cfg.seed, "generator"),
                          noise_dim=cfg.generator.noise_dim, image_size=(h, w, test_set.images.shape[1]),
                          width=cfg.generator.width, mean=test_set.mean, std=test_set.std)
    gen.train()
    l_st = default_start_layer(teacher.num_bn_layers) if cfg.fda.l_st < 0 else cfg.fda.l_st
    if l_st >= teacher.num_bn_layers:
        raise ValueError(f"fda.l_st={l_st} but the teacher has {teacher.num_bn_layers} BN layers")
    return ExperimentState(
        cfg=cfg, teacher=teacher, generator=gen, student=student,
        gen_opt=make_optimizer(gen.parameters(), cfg.generator.lr),
        student_opt=make_optimizer(student.parameters(), cfg.schedule.student_lr),
        bn_params=[BNLayerParams.from_module(bn) for bn in teacher.bn_layers],
        test_set=test_set, teacher_hash=state_hash(teacher),
        teacher_acc=evaluate(teacher, test_set, cfg.schedule.eval_batch_size), l_st=l_st,
    )


def _check_finite(loss: torch.Tensor, what: str, state: ExperimentState):
    if not torch.isfinite(loss):
        raise TrainingDivergedError(f"non-finite {what} loss at epoch {state.epoch + 1}, step {state.step}")


def _synthesize(state: ExperimentState):
    labels = state.labels
    batch = sample_synthetic(state.generator, labels, derive_seed(state.cfg.seed, "noise", state.step), grad=True)
    out = forward_with_taps(state.teacher, batch.images)
    return batch, out


def warmup_step(state: ExperimentState) -> dict:
    """One generator update on CE + alpha1 * BN-statistic matching."""
    batch, out = _synthesize(state)
    terms: dict = {}
    loss = generator_objective_warmup(GeneratorBatch(out.logits, batch.pseudo_labels, out.taps),
                                      state.bn_params, state.weights, terms)
    _check_finite(loss, "warm-up", state)
    state.gen_opt.zero_grad()
    loss.backward()
    state.gen_opt.step()
    state.step += 1
    return terms


@dataclass
class StepResult:
    batch: object
    terms: dict
    observed: list


def generator_step(state: ExperimentState) -> StepResult:
    """Generator update on the full objective, then EMA update of the centroids with this batch."""
    if state.bank is None:
        raise PhaseError("centroids must be initialized before alignment losses are used")
    batch, out = _synthesize(state)
    cstats = class_batch_stats(out.taps, batch.pseudo_labels, out.logits, state.l_st)
    terms: dict = {}
    ctx = GeneratorBatch(out.logits, batch.pseudo_labels, out.taps, cstats)
    loss = generator_objective_full(ctx, state.bn_params, state.bank, state.weights, state.de_cfg,
                                    step=state.step, terms=terms)
    _check_finite(loss, "generator", state)
    state.gen_opt.zero_grad()
    loss.backward()
    state.gen_opt.step()
    ema_update(state.bank, cstats.detached())
    batch.images = batch.images.detach()
    batch.teacher_logits = out.logits.detach()
    state.step += 1
    return StepResult(batch, terms, sorted(cstats.keys()))


def finetune_step(state: ExperimentState, batch) -> dict:
    """One distillation step of the student; activation trackers observe the batch."""
    student = state.student
    student.train()
    with student.observing():
        logits = student(batch.images)
    terms: dict = {}
    loss = finetune_objective(logits, batch.teacher_logits, batch.pseudo_labels, state.weights.gamma, terms)
    _check_finite(loss, "fine-tune", state)
    state.student_opt.zero_grad()
    loss.backward()
    state.student_opt.step()
    student.eval()
    return terms


def probe_metrics(state: ExperimentState) -> tuple[float, float]:
    """Fisher ratio at the last BN layer and class diversity of penultimate features on a fixed probe batch."""
    n_c = state.teacher.num_classes
    labels = balanced_labels(n_c, n_c * state.cfg.schedule.probe_per_class)
    with torch.no_grad():
        batch = sample_synthetic(state.generator, labels, derive_seed(state.cfg.seed, "probe"))
        out = forward_with_taps(state.teacher, batch.images)
    last = out.taps[-1].features.mean(dim=(2, 3))
    fisher = fisher_separability(last, labels, layer=len(out.taps) - 1).fisher_ratio
    return fisher, class_diversity(out.penultimate, labels)


def initialize_centroids(state: ExperimentState) -> None:
    """Build the centroid bank; the same batches calibrate the student's activation ranges."""
    if state.bank is not None:
        return
    cfg = state.cfg

    def observe(batch):
        with state.student.observing():
            state.student(batch.images)

    state.student.eval()
    state.bank = init_centroids(state.generator, state.teacher, cfg.fda.init_batches, cfg.schedule.batch_size,
                                l_st=state.l_st, beta_fd=cfg.fda.beta_fd,
                                noise_seed=derive_seed(cfg.seed, "init"), on_batch=observe)
    state.post_quant_acc = evaluate(frozen_copy(state.student), state.test_set, cfg.schedule.eval_batch_size)
    state.warmup_fisher, state.warmup_diversity = probe_metrics(state)
    log.info("centroids: %d entries; post-quantization acc %.4f", len(state.bank.keys()), state.post_quant_acc)


def _mean(values):
    return float(np.mean([float(v) for v in values])) if values else None


def _warmup_epoch(state: ExperimentState) -> dict:
    terms = [warmup_step(state) for _ in range(state.cfg.schedule.steps_per_epoch)]
    return {"L_CE": _mean([t["ce"] for t in terms]), "L_BNS": _mean([t["bns"] for t in terms])}


def _alternating_epoch(state: ExperimentState) -> dict:
    g_terms, s_terms = [], []
    every = state.cfg.schedule.student_update_every
    for _ in range(state.cfg.schedule.steps_per_epoch):
        res = generator_step(state)
        g_terms.append(res.terms)
        if state.step % every == 0:
            s_terms.append(finetune_step(state, res.batch))
    row = {k: _mean([t[src] for t in g_terms]) for k, src in
           (("L_CE", "ce"), ("L_BNS", "bns"), ("L_FDA", "fda"), ("L_DE", "de"))}
    row["L_KD"] = _mean([t["kd"] for t in s_terms])
    row["student_acc"] = evaluate(frozen_copy(state.student), state.test_set, state.cfg.schedule.eval_batch_size)
    return row


def warmup_phase(state: ExperimentState) -> ExperimentState:
    run_epochs(state, state.cfg.warmup_epochs)
    return state


def run_epochs(state: ExperimentState, until_epoch: int) -> ExperimentState:
    cfg = state.cfg
    until_epoch = min(until_epoch, cfg.total_epochs)
    while state.epoch < until_epoch:
        epoch = state.epoch + 1
        if epoch <= cfg.warmup_epochs:
            row = _warmup_epoch(state)
        else:
            initialize_centroids(state)
            row = _alternating_epoch(state)
        row["fisher_ratio"], row["diversity"] = probe_metrics(state)
        row.update(epoch=epoch, step=state.step)
        state.rows.append(row)
        state.epoch = epoch
        log.info("epoch %d/%d step %d %s", epoch, cfg.total_epochs, state.step,
                 " ".join(f"{k}={v:.4g}" for k, v in row.items() if isinstance(v, float)))
    return state


def finish(state: ExperimentState, variant: str = "full") -> Report:
    """Freeze activation ranges, run the final evaluation and assemble the report."""
    initialize_centroids(state)
    state.student.freeze_ranges()
    final_acc = evaluate(state.student, state.test_set, state.cfg.schedule.eval_batch_size)
    if state_hash(state.teacher) != state.teacher_hash:
        raise RuntimeError("teacher parameters changed during the run")
    fisher, diversity = probe_metrics(state)
    return Report(
        variant=variant, seed=state.cfg.seed, teacher_acc=state.teacher_acc,
        post_quant_acc=state.post_quant_acc, final_acc=final_acc,
        warmup_fisher=state.warmup_fisher, final_fisher=fisher,
        warmup_diversity=state.warmup_diversity, final_diversity=diversity,
        rows=list(state.rows), config=state.cfg.resolved(),
    )


def run_clusterq(cfg: ExperimentConfig, teacher: Classifier, test_set: LabeledDataset, out_dir=None,
                 variant: str = "full", resume_from=None) -> Report:
    """Warm-up, centroid initialization, alternating generator/student training, final evaluation.

    With ``out_dir`` the metrics CSV, the report JSON, a resumable state
    checkpoint and the generator and student checkpoints are written there.
    """
    if resume_from is not None:
        state = load_state(resume_from, teacher, test_set)
    else:
        state = start_experiment(cfg, teacher, test_set)
    run_epochs(state, cfg.total_epochs)
    report = finish(state, variant)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(report.metrics_csv())
        report.save_json(out / "report.json")
        save_state(state, out / "state.ckpt")
        save_quantized(out / "student.ckpt", state.student)
        save_container(out / "generator.ckpt", Container(state.generator.descriptor,
                                                         module_arrays(state.generator)))
    return report


def _optim_arrays(opt: torch.optim.Optimizer, prefix: str):
    sd = opt.state_dict()
    arrays = {}
    for idx in sorted(sd["state"]):
        for k in sorted(sd["state"][idx]):
            v = sd["state"][idx][k]
            arrays[f"{prefix}{idx}/{k}"] = torch.as_tensor(v).detach().numpy().copy()
    return arrays, sd["param_groups"]


def _load_optim(opt: torch.optim.Optimizer, arrays, prefix: str, groups):
    state: dict = {}
    for name, arr in arrays.items():
        if name.startswith(prefix):
            idx, k = name[len(prefix):].split("/")
            state.setdefault(int(idx), {})[k] = torch.from_numpy(arr.copy())
    opt.load_state_dict({"state": state, "param_groups": groups})


def save_state(state: ExperimentState, path) -> None:
    """Write everything needed to resume the run at the current epoch boundary."""
    arrays = {}
    arrays.update(module_arrays(state.generator, "generator/"))
    arrays.update(module_arrays(state.student, "student/"))
    for i, t in enumerate(state.student.trackers()):
        arrays[f"tracker/{i}"] = np.array([t.running_max, t.initialized, t.frozen, t.momentum], dtype=np.float64)
    if state.bank is not None:
        for (l, c) in state.bank.keys():
            arrays[f"bank/mu/{l}/{c}"] = state.bank.mu[(l, c)].numpy().copy()
            arrays[f"bank/sigma/{l}/{c}"] = state.bank.sigma[(l, c)].numpy().copy()
    g_arrays, g_groups = _optim_arrays(state.gen_opt, "optim/gen/")
    s_arrays, s_groups = _optim_arrays(state.student_opt, "optim/student/")
    arrays.update(g_arrays)
    arrays.update(s_arrays)
    meta = {
        "step": state.step, "epoch": state.epoch, "rows": state.rows, "l_st": state.l_st,
        "post_quant_acc": state.post_quant_acc, "warmup_fisher": state.warmup_fisher,
        "warmup_diversity": state.warmup_diversity, "teacher_hash": state.teacher_hash,
        "teacher_acc": state.teacher_acc, "bank": None if state.bank is None else {
            "num_layers": state.bank.num_layers, "num_classes": state.bank.num_classes,
            "l_st": state.bank.l_st, "beta_fd": state.bank.beta_fd},
        "gen_param_groups": g_groups, "student_param_groups": s_groups,
    }
    manifest = {"config": state.cfg.resolved(), "seed": state.cfg.seed}
    save_container(path, Container("experiment-state", arrays, manifest, meta))


def load_state(path, teacher: Classifier, test_set: LabeledDataset) -> ExperimentState:
    from .config import parse_config

    c = load_container(path)
    resolved = c.manifest["config"]
    cfg = parse_config(overrides=resolved, env={})
    state = start_experiment(cfg, teacher, test_set)
    if state.teacher_hash != c.meta["teacher_hash"]:
        raise ValueError("checkpoint was produced with a different teacher")
    load_module_arrays(state.generator, c.arrays, "generator/")
    load_module_arrays(state.student, c.arrays, "student/")
    for i, t in enumerate(state.student.trackers()):
        running_max, initialized, frozen, momentum = c.arrays[f"tracker/{i}"].tolist()
        t.running_max, t.initialized, t.frozen, t.momentum = running_max, bool(initialized), bool(frozen), momentum
    bank_meta = c.meta["bank"]
    if bank_meta is not None:
        bank = CentroidBank(**bank_meta)
        for name, arr in c.arrays.items():
            if name.startswith("bank/mu/"):
                l, cl = map(int, name.split("/")[2:])
                bank.set((l, cl), torch.from_numpy(arr.copy()),
                         torch.from_numpy(c.arrays[f"bank/sigma/{l}/{cl}"].copy()))
        state.bank = bank
    _load_optim(state.gen_opt, c.arrays, "optim/gen/", c.meta["gen_param_groups"])
    _load_optim(state.student_opt, c.arrays, "optim/student/", c.meta["student_param_groups"])
    state.step, state.epoch, state.rows = c.meta["step"], c.meta["epoch"], c.meta["rows"]
    state.post_quant_acc = c.meta["post_quant_acc"]
    state.warmup_fisher, state.warmup_diversity = c.meta["warmup_fisher"], c.meta["warmup_diversity"]
    return state


@dataclass
class AblationRow:
    variant: str
    seed: int
    report: Report


def run_ablation(cfg: ExperimentConfig, variants, teacher: Classifier, test_set: LabeledDataset,
                 seeds=None, out_dir=None) -> list[AblationRow]:
    """One run per (variant, seed), all sharing the same teacher."""
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise ValueError(f"unknown ablation variants: {unknown}; known: {list(VARIANTS)}")
    seeds = [cfg.seed] if seeds is None else list(seeds)
    rows = []
    for variant in variants:
        for seed in seeds:
            vcfg = with_overrides(cfg, seed=seed, **{k.replace(".", "__"): v for k, v in VARIANTS[variant].items()})
            sub = None if out_dir is None else Path(out_dir) / f"{variant}-seed{seed}"
            rows.append(AblationRow(variant, seed, run_clusterq(vcfg, teacher, test_set, sub, variant=variant)))
    return rows


def summarize(rows: list[AblationRow], key: str = "final_acc") -> dict[str, float]:
    """Median of ``key`` across seeds for each variant, preserving variant order."""
    out: dict[str, list] = {}
    for r in rows:
        out.setdefault(r.variant, []).append(getattr(r.report, key))
    return {v: statistics.median(vals) for v, vals in out.items()}


def ablation_table(rows: list[AblationRow]) -> str:
    keys = ("teacher_acc", "post_quant_acc", "final_acc", "final_fisher", "final_diversity")
    med = {k: summarize(rows, k) for k in keys}
    lines = ["| variant | L_DE | EMA | seeds | " + " | ".join(keys) + " |",
             "|" + "---|" * (4 + len(keys))]
    seeds: dict[str, int] = {}
    for r in rows:
        seeds[r.variant] = seeds.get(r.variant, 0) + 1
    for v in med["final_acc"]:
        de = "yes" if v in ("full", "no_EMA") else "-"
        ema = "yes" if v in ("full", "no_DE") else "-"
        vals = " | ".join(f"{med[k][v]:.4f}" for k in keys)
        lines.append(f"| {v} | {de} | {ema} | {seeds[v]} | {vals} |")
    return "\n".join(lines) + "\n"
