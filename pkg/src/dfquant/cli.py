"""``dfquant`` command line.

All commands share a work directory laid out as::

    data/train.bin, data/test.bin   (+ .json sidecars)
    teacher.ckpt
    quantized/                      no-fine-tune baseline
    runs/<variant>-seed<k>/         one training run
    ablation/, sweep-<param>/
    manifest.jsonl                  append-only record of every output and its sha256

Every config key is also a flag, e.g. ``--quant.weight-bits 4`` or
``--schedule.total-epochs 10``. The root seed may come from ``--seed`` or the
``DFQ_SEED`` environment variable (the flag wins).
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .config import ConfigError, ExperimentConfig, parse_config, with_overrides

log = logging.getLogger("dfquant")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class MissingPrerequisite(Exception):
    def __init__(self, path, hint: str = ""):
        self.path = Path(path)
        super().__init__(f"missing prerequisite: {self.path}" + (f" ({hint})" if hint else ""))


def _require(path, hint=""):
    if not Path(path).exists():
        raise MissingPrerequisite(path, hint)
    return Path(path)


# ---- config flags ------------------------------------------------------------

def _add_config_flags(p: argparse.ArgumentParser):
    g = p.add_argument_group("configuration")
    g.add_argument("--config", help="YAML or JSON config file")
    g.add_argument("--seed", dest="cfg:seed", default=argparse.SUPPRESS, help="root seed")
    g.add_argument("--paper-scale", dest="cfg:paper_scale", action="store_const", const="true",
                   default=argparse.SUPPRESS, help="use the full 400/50 epoch schedule")
    for section in dataclasses.fields(ExperimentConfig):
        if section.default_factory is dataclasses.MISSING:
            continue  # top-level scalars handled above
        for f in dataclasses.fields(section.default_factory):
            flag = f"--{section.name}.{f.name.replace('_', '-')}"
            g.add_argument(flag, dest=f"cfg:{section.name}.{f.name}", default=argparse.SUPPRESS, metavar="V")


def _config_from(args) -> ExperimentConfig:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg:")}
    return parse_config(args.config, overrides)


# ---- paths -------------------------------------------------------------------

def _data_dir(args) -> Path:
    return Path(args.data) if getattr(args, "data", None) else Path(args.workdir) / "data"


def _teacher_path(args) -> Path:
    return Path(args.teacher) if getattr(args, "teacher", None) else Path(args.workdir) / "teacher.ckpt"


def _load_split(args, split):
    from .data import load_external, verify_checksum

    path = _require(_data_dir(args) / f"{split}.bin", "run `dfquant gen-data` first")
    if Path(str(path) + ".json").exists() and not verify_checksum(path):
        raise ValueError(f"checksum mismatch for {path}")
    return load_external(path), path


def _load_teacher(args):
    from .modelkit import load_classifier

    path = _require(_teacher_path(args), "run `dfquant train-teacher` first")
    return load_classifier(path)[0], path


def _manifest(args, command, outputs, inputs=(), cfg=None, extra=None):
    from .report import append_manifest

    append_manifest(args.workdir, command, outputs, inputs, cfg, extra)


# ---- commands ----------------------------------------------------------------

def cmd_gen_data(args, cfg):
    from .data import DatasetSpec, export_dataset, make_toy_dataset

    d = cfg.data
    spec = DatasetSpec(num_classes=d.num_classes, samples_per_class=d.samples_per_class,
                       image_size=(d.image_size, d.image_size, d.channels), noise_level=d.noise_level,
                       color_jitter=d.color_jitter, seed=d.seed)
    out = _data_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    train, test = make_toy_dataset(spec)
    paths = []
    for ds in (train, test):
        p = out / f"{ds.split}.bin"
        export_dataset(ds, p)
        paths += [p, Path(str(p) + ".json")]
    _manifest(args, "gen-data", paths, cfg=cfg)
    print(json.dumps({"train": len(train), "test": len(test), "dir": str(out)}))


def cmd_train_teacher(args, cfg):
    from .modelkit import TeacherSchedule, build_classifier, save_classifier, train_teacher
    from .pipeline import evaluate

    train, train_path = _load_split(args, "train")
    test, test_path = _load_split(args, "test")
    t = cfg.teacher
    model = build_classifier(cfg.model.arch, train.num_classes, seed=t.seed,
                             in_channels=train.images.shape[1], width=cfg.model.width)
    model, hist = train_teacher(model, train, TeacherSchedule(t.epochs, t.lr, t.batch_size, t.weight_decay, t.seed))
    result = {"train_acc": evaluate(model, train), "test_acc": evaluate(model, test),
              "final_loss": hist.epoch_loss[-1]}
    out = _teacher_path(args)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_classifier(out, model, manifest={"teacher": dataclasses.asdict(t), "model": dataclasses.asdict(cfg.model)},
                    meta=result)
    _manifest(args, "train-teacher", [out], [train_path, test_path], cfg, {"result": result})
    print(json.dumps(result))


def _run_dir(args, name):
    return Path(args.out) if getattr(args, "out", None) else Path(args.workdir) / name


def cmd_quantize(args, cfg):
    from .modelkit import save_quantized
    from .pipeline import finish, run_epochs, start_experiment

    teacher, tpath = _load_teacher(args)
    test, test_path = _load_split(args, "test")
    ncfg = with_overrides(cfg, schedule__total_epochs=cfg.warmup_epochs)
    state = start_experiment(ncfg, teacher, test)
    run_epochs(state, ncfg.total_epochs)
    report = finish(state, "no_finetune")
    out = _run_dir(args, "quantized")
    out.mkdir(parents=True, exist_ok=True)
    save_quantized(out / "student.ckpt", state.student, manifest={"config": ncfg.resolved()})
    report.save_json(out / "report.json")
    _manifest(args, "quantize", [out / "student.ckpt", out / "report.json"], [tpath, test_path], ncfg)
    print(json.dumps({"teacher_acc": report.teacher_acc, "quantized_acc": report.final_acc}))


def cmd_dfq_run(args, cfg):
    from .pipeline import run_clusterq

    teacher, tpath = _load_teacher(args)
    test, test_path = _load_split(args, "test")
    out = _run_dir(args, f"runs/{args.variant}-seed{cfg.seed}")
    if args.variant != "full":
        from .pipeline import VARIANTS
        cfg = with_overrides(cfg, **{k.replace(".", "__"): v for k, v in VARIANTS[args.variant].items()})
    resume = None
    if args.resume:
        resume = _require(out / "state.ckpt", "nothing to resume")
    report = run_clusterq(cfg, teacher, test, out_dir=out, variant=args.variant, resume_from=resume)
    files = [out / n for n in ("metrics.csv", "report.json", "state.ckpt", "generator.ckpt", "student.ckpt")]
    _manifest(args, "dfq-run", files, [tpath, test_path], cfg)
    print(json.dumps({"teacher_acc": report.teacher_acc, "post_quant_acc": report.post_quant_acc,
                      "final_acc": report.final_acc, "out": str(out)}))


def cmd_eval(args, cfg):
    from .modelkit import load_container, load_quantized
    from .modelkit.classifier import build_classifier, parse_descriptor
    from .modelkit.checkpoint import load_module_arrays
    from .pipeline import evaluate

    path = _require(args.checkpoint)
    test, _ = _load_split(args, "test")
    c = load_container(path)
    if c.descriptor.startswith("fq:"):
        model = load_quantized(path)
        if not all(t.initialized for t in model.trackers()):
            raise ValueError(f"{path}: activation ranges were never calibrated")
        model.freeze_ranges()
    else:
        spec = parse_descriptor(c.descriptor)
        model = build_classifier(spec.pop("arch"), **spec)
        load_module_arrays(model, c.arrays)
    print(json.dumps({"checkpoint": str(path), "accuracy": evaluate(model, test, cfg.schedule.eval_batch_size)}))


def cmd_ablate(args, cfg):
    from .pipeline import ablation_table, run_ablation, summarize

    teacher, tpath = _load_teacher(args)
    test, test_path = _load_split(args, "test")
    out = _run_dir(args, "ablation")
    out.mkdir(parents=True, exist_ok=True)
    rows = run_ablation(cfg, args.variants, teacher, test, seeds=args.seeds, out_dir=out)
    (out / "ablation.md").write_text(ablation_table(rows))
    (out / "ablation.json").write_text(json.dumps(
        [{"variant": r.variant, "seed": r.seed, **{k: v for k, v in r.report.to_dict().items() if k != "rows"}}
         for r in rows], indent=2, sort_keys=True) + "\n")
    files = [out / "ablation.md", out / "ablation.json"]
    files += [out / f"{r.variant}-seed{r.seed}" / n for r in rows for n in ("metrics.csv", "report.json")]
    _manifest(args, "ablate", files, [tpath, test_path], cfg)
    print(ablation_table(rows), end="")
    log.info("medians: %s", summarize(rows))


def cmd_sweep(args, cfg):
    from .report import SweepSpec, plot_sweep, run_sweep

    spec = SweepSpec(args.param, tuple(args.values), args.repeats)
    spec.validate()
    teacher, tpath = _load_teacher(args)
    test, test_path = _load_split(args, "test")
    out = _run_dir(args, f"sweep-{args.param}")
    out.mkdir(parents=True, exist_ok=True)
    result = run_sweep(spec, cfg, teacher, test, out_dir=out)
    (out / "sweep.md").write_text(result.table())
    with open(out / "sweep.csv", "w") as f:
        f.write(f"{args.param},seed_offset,final_acc\n")
        for v, accs in result.accuracies.items():
            for r, a in enumerate(accs):
                f.write(f"{v!r},{r},{a!r}\n")
    plot_sweep(result, out / "sweep.png")
    _manifest(args, "sweep", [out / "sweep.md", out / "sweep.csv", out / "sweep.png"], [tpath, test_path], cfg,
              {"sweep": {"param": spec.param, "values": list(spec.values), "repeats": spec.repeats}})
    print(result.table(), end="")


def cmd_report(args, cfg):
    from .report import verify_manifest, write_run_report

    runs = [Path(r) for r in args.runs] if args.runs else sorted(
        p.parent for p in (Path(args.workdir) / "runs").glob("*/report.json"))
    if not runs:
        raise MissingPrerequisite(Path(args.workdir) / "runs", "no run directories with report.json")
    teacher = None
    if _teacher_path(args).exists():
        teacher = _load_teacher(args)[0]
    outputs = []
    for run in runs:
        _require(run / "report.json")
        outputs += write_run_report(run, teacher)
    _manifest(args, "report", outputs)
    stale = verify_manifest(args.workdir)
    for s in stale:
        log.warning("artifact differs from its manifest hash: %s", s)
    print(json.dumps({"reports": [str(r / "report.md") for r in runs], "stale": stale}))
    return EXIT_FAIL if stale else EXIT_OK


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate the procedural toy dataset"),
    "train-teacher": (cmd_train_teacher, "train the full-precision teacher"),
    "quantize": (cmd_quantize, "quantize the teacher without fine-tuning (baseline)"),
    "dfq-run": (cmd_dfq_run, "run the full data-free quantization pipeline"),
    "eval": (cmd_eval, "evaluate a classifier or quantized checkpoint on the test split"),
    "ablate": (cmd_ablate, "run the ablation variants over several seeds"),
    "sweep": (cmd_sweep, "sweep beta_fd or alpha3"),
    "report": (cmd_report, "regenerate reports, plots and grids from existing runs"),
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dfquant", description="Data-free low-bit quantization experiments.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--workdir", default=".", help="experiment directory (default: .)")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name != "gen-data":
            sp.add_argument("--data", help="dataset directory (default: WORKDIR/data)")
        if name not in ("gen-data", "eval"):
            sp.add_argument("--teacher", help="teacher checkpoint (default: WORKDIR/teacher.ckpt)")
        if name in ("quantize", "dfq-run", "ablate", "sweep"):
            sp.add_argument("--out", help="output directory")
        if name == "dfq-run":
            sp.add_argument("--variant", default="full", choices=["full", "no_DE", "no_EMA", "neither"])
            sp.add_argument("--resume", action="store_true", help="continue from OUT/state.ckpt")
        if name == "eval":
            sp.add_argument("checkpoint")
        if name == "ablate":
            sp.add_argument("--variants", nargs="+", default=["full", "no_DE", "no_EMA", "neither"])
            sp.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
        if name == "sweep":
            sp.add_argument("--param", required=True, choices=["beta_fd", "alpha3"])
            sp.add_argument("--values", nargs="+", type=float, required=True)
            sp.add_argument("--repeats", type=int, default=1)
        if name == "report":
            sp.add_argument("runs", nargs="*", help="run directories (default: WORKDIR/runs/*)")
        _add_config_flags(sp)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    Path(args.workdir).mkdir(parents=True, exist_ok=True)
    fn = COMMANDS[args.command][0]
    try:
        cfg = _config_from(args)
        code = fn(args, cfg)
    except (MissingPrerequisite, ConfigError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
