"""Experiment manifests, sweeps, plots and synthetic-image grids."""
from __future__ import annotations

import datetime as _dt
import json
import statistics
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import __version__
from .config import ExperimentConfig, with_overrides
from .data import sha256_file
from .modelkit.generator import Generator, sample_synthetic
from .pipeline import Report, run_clusterq

MANIFEST_NAME = "manifest.jsonl"
SWEEP_PARAMS = {"beta_fd": "fda__beta_fd", "alpha3": "loss__alpha3"}
_PNG_META = {"Software": None}


class MissingArtifactError(FileNotFoundError):
    pass


def _rel(path: Path, root: Path) -> str:
    try:
        return str(path.resolve().relative_to(root.resolve()))
    except ValueError:
        return str(path.resolve())


def hash_paths(paths, root) -> dict[str, str]:
    root = Path(root)
    return {_rel(Path(p), root): sha256_file(p) for p in sorted(map(str, paths))}


def read_manifest(out_dir) -> list[dict]:
    p = Path(out_dir) / MANIFEST_NAME
    if not p.exists():
        return []
    return [json.loads(line) for line in p.read_text().splitlines() if line.strip()]


def append_manifest(out_dir, command: str, outputs, inputs=(), cfg: ExperimentConfig | None = None,
                    extra: dict | None = None) -> dict:
    """Append one entry listing every output with its sha256.

    An entry whose command, inputs and outputs all match the latest entry for
    the same command is not repeated, so re-running a pure step leaves the
    manifest unchanged.
    """
    out_dir = Path(out_dir)
    entry = {
        "command": command,
        "tool_version": __version__,
        "seed": None if cfg is None else cfg.seed,
        "config": None if cfg is None else cfg.resolved(),
        "inputs": hash_paths(inputs, out_dir),
        "outputs": hash_paths(outputs, out_dir),
        **(extra or {}),
    }
    previous = [e for e in read_manifest(out_dir) if e.get("command") == command]
    if previous:
        last = {k: v for k, v in previous[-1].items() if k != "timestamp"}
        if last == entry:
            return previous[-1]
    entry["timestamp"] = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    with open(out_dir / MANIFEST_NAME, "a") as f:
        f.write(json.dumps(entry, sort_keys=True) + "\n")
    return entry


def verify_manifest(out_dir) -> list[str]:
    """Paths whose current hash disagrees with the latest manifest record (or that are gone)."""
    out_dir = Path(out_dir)
    latest: dict[str, str] = {}
    for e in read_manifest(out_dir):
        latest.update(e["outputs"])
    bad = []
    for rel, digest in sorted(latest.items()):
        p = Path(rel) if Path(rel).is_absolute() else out_dir / rel
        if not p.exists() or sha256_file(p) != digest:
            bad.append(rel)
    return bad


# ---- synthetic grids -------------------------------------------------------

def to_uint8(images: torch.Tensor) -> np.ndarray:
    """Generator output in [-1, 1] (N, C, H, W) to uint8 (N, H, W, C)."""
    x = ((images.detach().clamp(-1, 1) + 1) * 127.5).round().to(torch.uint8)
    return x.permute(0, 2, 3, 1).numpy()


def dump_synthetic_grid(generator: Generator, path, k: int = 8, seed: int = 0, teacher=None, pad: int = 2) -> np.ndarray:
    """Write a PNG with one row per class and ``k`` samples per row.

    With a ``teacher``, samples it misclassifies get a red frame. Returns the
    uint8 tiles with shape (num_classes, k, H, W, C).
    """
    n_c = generator.num_classes
    labels = torch.arange(n_c).repeat_interleave(k)
    was_training = generator.training
    generator.train()  # batch statistics, as during training
    with torch.no_grad():
        raw = generator(sample_synthetic(generator, labels, seed).noise, labels)
        wrong = None
        if teacher is not None:
            wrong = (teacher(generator.to_model_space(raw)).argmax(1) != labels).numpy()
    generator.train(was_training)
    tiles = to_uint8(raw)
    n, h, w, c = tiles.shape
    if c == 1:
        tiles = np.repeat(tiles, 3, axis=3)
    grid = np.full((n_c * (h + pad) + pad, k * (w + pad) + pad, 3), 255, dtype=np.uint8)
    for i in range(n):
        r, col = divmod(i, k)
        y, x = pad + r * (h + pad), pad + col * (w + pad)
        if wrong is not None and wrong[i]:
            grid[y - 1:y + h + 1, x - 1:x + w + 1] = (220, 0, 0)
        grid[y:y + h, x:x + w] = tiles[i]
    Image.fromarray(grid).save(path, format="PNG", optimize=False)
    return tiles.reshape(n_c, k, h, w, tiles.shape[3])[..., :c]


# ---- plots -----------------------------------------------------------------

def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def plot_training_curves(report: Report, path) -> None:
    plt = _pyplot()
    rows = report.rows
    epochs = [r["epoch"] for r in rows]
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.2))
    for key in ("L_CE", "L_BNS", "L_FDA", "L_DE", "L_KD"):
        pts = [(e, r[key]) for e, r in zip(epochs, rows) if r.get(key) is not None]
        if pts:
            axes[0].plot(*zip(*pts), label=key, marker=".")
    axes[0].set_yscale("log")
    axes[0].set_title("losses")
    axes[0].legend(fontsize=7)
    acc = [(e, r["student_acc"]) for e, r in zip(epochs, rows) if r.get("student_acc") is not None]
    if acc:
        axes[1].plot(*zip(*acc), marker=".")
    axes[1].axhline(report.teacher_acc, ls="--", c="k", lw=0.8, label="teacher")
    axes[1].axhline(report.post_quant_acc, ls=":", c="r", lw=0.8, label="no fine-tune")
    axes[1].set_title("student accuracy")
    axes[1].legend(fontsize=7)
    axes[2].plot(epochs, [r["fisher_ratio"] for r in rows], marker=".", label="fisher ratio")
    ax2 = axes[2].twinx()
    ax2.plot(epochs, [r["diversity"] for r in rows], marker=".", c="tab:orange", label="diversity")
    axes[2].set_title("separability / diversity")
    for ax in axes:
        ax.set_xlabel("epoch")
    fig.tight_layout()
    fig.savefig(path, format="png", metadata=_PNG_META)
    plt.close(fig)


# ---- sweeps ----------------------------------------------------------------

@dataclass(frozen=True)
class SweepSpec:
    param: str
    values: tuple[float, ...]
    repeats: int = 1

    def validate(self):
        if self.param not in SWEEP_PARAMS:
            raise ValueError(f"sweep parameter must be one of {sorted(SWEEP_PARAMS)}, got {self.param!r}")
        if not self.values:
            raise ValueError("sweep needs at least one value")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        for v in self.values:
            if self.param == "beta_fd" and not 0 <= v <= 1:
                raise ValueError(f"beta_fd value {v} outside [0, 1]")
            if self.param == "alpha3" and v < 0:
                raise ValueError(f"alpha3 value {v} must be >= 0")


@dataclass
class SweepResult:
    spec: SweepSpec
    accuracies: dict[float, list[float]]

    def medians(self) -> dict[float, float]:
        return {v: statistics.median(a) for v, a in self.accuracies.items()}

    def table(self) -> str:
        lines = [f"| {self.spec.param} | median final_acc | per-seed |", "|---|---|---|"]
        for v, accs in self.accuracies.items():
            lines.append(f"| {v:g} | {statistics.median(accs):.4f} | {', '.join(f'{a:.4f}' for a in accs)} |")
        return "\n".join(lines) + "\n"


def run_sweep(spec: SweepSpec, cfg: ExperimentConfig, teacher, test_set, out_dir=None) -> SweepResult:
    """One run per (value, repeat); repeat r uses seed ``cfg.seed + r``."""
    spec.validate()
    key = SWEEP_PARAMS[spec.param]
    acc: dict[float, list[float]] = {}
    for v in spec.values:
        for r in range(spec.repeats):
            vcfg = with_overrides(cfg, seed=cfg.seed + r, **{key: v})
            sub = None if out_dir is None else Path(out_dir) / f"{spec.param}={v:g}-seed{cfg.seed + r}"
            acc.setdefault(v, []).append(run_clusterq(vcfg, teacher, test_set, sub).final_acc)
    return SweepResult(spec, acc)


def plot_sweep(result: SweepResult, path) -> None:
    plt = _pyplot()
    med = result.medians()
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    xs = list(med)
    ax.plot(xs, [med[x] for x in xs], marker="o")
    for x, accs in result.accuracies.items():
        ax.scatter([x] * len(accs), accs, s=8, c="gray")
    ax.set_xlabel(result.spec.param)
    ax.set_ylabel("final accuracy (median)")
    fig.tight_layout()
    fig.savefig(path, format="png", metadata=_PNG_META)
    plt.close(fig)


# ---- run reports -----------------------------------------------------------

def render_report(report: Report) -> str:
    drop = report.teacher_acc - report.post_quant_acc
    recovered = (report.final_acc - report.post_quant_acc) / drop if drop > 0 else float("nan")
    lines = [
        f"# Run report: {report.variant}, seed {report.seed}",
        "",
        "| metric | value |",
        "|---|---|",
        f"| teacher accuracy | {report.teacher_acc:.4f} |",
        f"| quantized, no fine-tune | {report.post_quant_acc:.4f} |",
        f"| quantized, final | {report.final_acc:.4f} |",
        f"| recovered fraction of drop | {recovered:.3f} |",
        f"| fisher ratio (warm-up -> final) | {report.warmup_fisher:.3f} -> {report.final_fisher:.3f} |",
        f"| diversity (warm-up -> final) | {report.warmup_diversity:.4f} -> {report.final_diversity:.4f} |",
        "",
        f"W{report.config['quant']['weight_bits']}A{report.config['quant']['act_bits']}, "
        f"{report.config['schedule']['total_epochs']} epochs "
        f"({report.config['schedule']['warmup_epochs']} warm-up).",
        "",
    ]
    return "\n".join(lines)


def write_run_report(run_dir, teacher=None) -> list[Path]:
    """Regenerate report.md, curves.png and (if a generator checkpoint exists) grid.png from a run directory.

    Reads only existing artifacts; nothing is trained. Outputs are byte-stable.
    """
    from .modelkit.checkpoint import load_container
    from .modelkit.generator import load_generator

    run_dir = Path(run_dir)
    rj = run_dir / "report.json"
    if not rj.exists():
        raise MissingArtifactError(f"missing run artifact: {rj}")
    report = Report.load_json(rj)
    outputs = [run_dir / "report.md", run_dir / "curves.png"]
    outputs[0].write_text(render_report(report))
    plot_training_curves(report, outputs[1])
    gpath = run_dir / "generator.ckpt"
    if gpath.exists():
        g = load_generator(load_container(gpath))
        dump_synthetic_grid(g, run_dir / "grid.png", k=8, seed=report.seed, teacher=teacher)
        outputs.append(run_dir / "grid.png")
    return outputs

