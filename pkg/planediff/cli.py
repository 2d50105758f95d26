"""The `planediff` command line.

Each command reads its upstream artifacts, runs one stage of the pipeline and
writes its outputs, a run manifest (`manifest.json`) and a line in the run
ledger to its `--out` directory:

```
planediff synth --out data --patients 64 --seed 7
planediff pretrain --data data --out ckpt
planediff probe --data data --checkpoints ckpt --out probe
planediff select --data data --checkpoints ckpt --grid probe/probe_grid.csv --out select
planediff finetune --data data --checkpoints ckpt --selection select/selection.json --out ft
planediff fuse --data data --stage1 ft --fusion mpae --out fused
planediff evaluate --data data --model fused --out eval
```

A failed command writes `error.json` next to the manifest and exits with
`EXIT.RUNTIME`, or with `EXIT.USAGE` for bad arguments, bad configuration and
missing upstream artifacts.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Final, List, Sequence, Set, Tuple

from pydantic import ValidationError

from planediff.artifacts import (
    MANIFEST_FILE,
    FusedModel,
    artifact_kind,
    load_fused,
    load_segmentation,
    load_stage1,
    load_stage1_set,
    save_fused,
    save_segmentation,
    save_stage1,
)
from planediff.config import RunConfig, load_config
from planediff.dataset import StudyStore
from planediff.denoiser import CheckpointManifest, UNet3D, build_denoiser, save_checkpoint
from planediff.diffusion import NoiseSchedule, pretrain, write_loss_curve
from planediff.error import EXIT, ErrorReport
from planediff.exceptions import (
    ConfigurationError,
    DivergedLoss,
    ManifestError,
    MissingUpstreamArtifact,
    RunLocked,
)
from planediff.feature_tap import FeatureCache, TapPoint, tap_grid
from planediff.fusion import FusionStrategy, write_gate_weights
from planediff.manifest import RUN_MANIFEST, RunManifest, directory_digest, file_digest
from planediff.metrics import MetricReport, permutation_test
from planediff.pooling import PoolingMethod
from planediff.seeding import deterministic
from planediff.selection import (
    ConfigSelection,
    GridKey,
    Task,
    efficiency_drop,
    label_efficiency_run,
    read_probe_grid,
    select_config,
    select_segmentation_taps,
    write_candidates,
    write_curve,
    write_probe_grid,
)
from planediff.synth_data import Split, generate_cohort, split_by_patient
from planediff.training import (
    MPAEResult,
    PatientPredictions,
    SegmentationResult,
    Setting,
    Stage,
    Stage1Result,
    TrainPlan,
    load_backbone,
    train_ehr_joint,
    train_ehr_only,
    train_mpae,
    train_segmentation,
    train_stage1,
    train_stage2_fusion,
)
from planediff.volume import ORIENTATIONS, Orientation

logger: Final = logging.getLogger(__name__)

LOG_FORMAT: Final = "%(asctime)s %(levelname)s %(name)s: %(message)s"
LOCK_FILE: Final = ".lock"
ERROR_FILE: Final = "error.json"
LEDGER_FILE: Final = "ledger.jsonl"
DEFAULT_TAP: Final = "t30/mid_2"
SUBGROUPS: Final = ("site", "field_strength")

INPUT_ARGS: Final = (
    "config",
    "data",
    "checkpoints",
    "grid",
    "selection",
    "stage1",
    "model",
    "baseline",
)
"""Arguments naming upstream artifacts; their content digests key the run cache."""


@dataclass
class Context:
    """What a command gets to work with."""

    args: argparse.Namespace
    config: RunConfig
    out: Path
    results: Dict[str, Any] = field(default_factory=dict)
    _backbones: Dict[Orientation, Tuple[UNet3D, CheckpointManifest]] = field(
        default_factory=dict, repr=False
    )

    def store(self) -> StudyStore:
        return StudyStore.open(self.args.data)

    def backbone(self, orientation: Orientation) -> Tuple[UNet3D, CheckpointManifest]:
        """The pretrained denoiser of `orientation`, loaded once per command."""
        if orientation not in self._backbones:
            root = self.args.checkpoints / orientation.value
            self._backbones[orientation] = load_backbone(root)
        return self._backbones[orientation]

    def plan(self, stage: Stage, **overrides: Any) -> TrainPlan:
        return self.config.plan(stage, **overrides)

    def cache(self, ckpt: CheckpointManifest) -> FeatureCache | None:
        root = getattr(self.args, "feature_cache", None)
        return None if root is None else FeatureCache(root, ckpt.digest, self.config.noise_seed)


def parse_tap(text: str) -> TapPoint:
    """`t30/mid_2` or `30/mid_2`."""
    step, sep, block = text.partition("/")
    try:
        if not sep:
            raise ValueError(text)
        return TapPoint.model_validate({"timestep": int(step.lstrip("t")), "block": block})
    except (ValueError, ValidationError) as e:
        raise ConfigurationError(f"bad tap {text!r}, expected e.g. {DEFAULT_TAP}") from e


def _taps(ctx: Context) -> Dict[Orientation, TapPoint]:
    if ctx.args.selection is not None:
        return dict(ConfigSelection.read(ctx.args.selection).taps)
    tap = parse_tap(ctx.args.tap)
    return {o: tap for o in ORIENTATIONS}


def _val_auroc(model: Stage1Result | FusedModel, store: StudyStore) -> float | None:
    return model.predict(store, store.records(Split.VAL)).report().macro_auroc


def _mean(values: Sequence[float]) -> float | None:
    return sum(values) / len(values) if values else None


def _masked_orientations(store: StudyStore, split: Split) -> List[Orientation]:
    records = store.records(split)
    return [
        o
        for o in ORIENTATIONS
        if any(r.orientation_of(s) is o for r in records for s in r.seg_scans)
    ]


def _stage1(
    ctx: Context,
    store: StudyStore,
    orientation: Orientation,
    tap: TapPoint,
    setting: Setting,
    backbone: UNet3D | None = None,
    **overrides: Any,
) -> Stage1Result:
    """Stage 1 on the pretrained backbone, or on `backbone` when given."""
    model, ckpt = ctx.backbone(orientation)
    return train_stage1(
        store,
        orientation,
        tap,
        setting,
        ctx.plan(setting.stage, **overrides),
        model if backbone is None else backbone,
        NoiseSchedule.from_config(ckpt.schedule),
        ctx.config.noise_seed,
        ctx.config.pooling,
        ctx.cache(ckpt) if backbone is None else None,
    )


def _segmentation(
    ctx: Context,
    store: StudyStore,
    orientation: Orientation,
    tap: TapPoint,
    backbone: UNet3D | None = None,
    **overrides: Any,
) -> Tuple[SegmentationResult, float | None]:
    model, ckpt = ctx.backbone(orientation)
    result = train_segmentation(
        store,
        orientation,
        tap,
        ctx.plan(Stage.SEG_FT, **overrides),
        model if backbone is None else backbone,
        NoiseSchedule.from_config(ckpt.schedule),
        ctx.config.noise_seed,
    )
    dice = result.evaluate(store, store.records(Split.VAL))
    return result, _mean(list(dice.values()))


def _train_fused(
    ctx: Context, stage1: Dict[Orientation, Stage1Result], store: StudyStore, **overrides: Any
) -> FusedModel:
    cfg = ctx.config
    ehr = getattr(ctx.args, "ehr", None)
    if ehr == "only":
        return train_ehr_only(store, ctx.plan(Stage.EHR_ONLY, **overrides))
    if ehr == "joint":
        return train_ehr_joint(stage1, store, ctx.plan(Stage.EHR_JOINT, **overrides))
    if cfg.fusion is FusionStrategy.MPAE:
        return train_mpae(
            stage1,
            store,
            ctx.plan(Stage.STAGE2_FUSION, **overrides),
            ctx.plan(Stage.MPAE_GATE, **overrides),
        )
    return train_stage2_fusion(
        stage1, store, cfg.fusion, ctx.plan(Stage.STAGE2_FUSION, **overrides), cfg.embed_dim
    )


def cmd_synth(ctx: Context) -> None:
    studies = generate_cohort(ctx.config.phantom)
    records = [s.record for s in studies]
    index = split_by_patient(records, ctx.config.split_fractions, ctx.config.seed)
    StudyStore.from_studies(index, studies).write(ctx.out)
    ctx.results["patients"] = len(studies)
    ctx.results["splits"] = {s.value: len(ids) for s, ids in index.splits.items()}


def cmd_pretrain(ctx: Context) -> None:
    store = ctx.store()
    cfg = ctx.config
    sched = NoiseSchedule.from_config(cfg.schedule)
    orientations = [Orientation(ctx.args.orientation)] if ctx.args.orientation else ORIENTATIONS
    for o in orientations:
        result = pretrain(store, o, cfg.pretrain, sched, cfg.denoiser)
        save_checkpoint(
            ctx.out / o.value, result.model, cfg.schedule, cfg.pretrain.steps, cfg.pretrain.seed, o
        )
        write_loss_curve(ctx.out / f"{o.value}_loss.csv", result.losses)
        ctx.results[f"{o.value}_final_loss"] = result.losses[-1]
    store.assert_test_unread()


def cmd_probe(ctx: Context) -> None:
    """Score every (orientation, tap) on the validation split."""
    store = ctx.store()
    setting = Setting(ctx.args.setting)
    task = Task(ctx.args.task)
    orientations: Sequence[Orientation] = ORIENTATIONS
    if task is Task.SEGMENTATION:
        orientations = _masked_orientations(store, Split.VAL)
    grid: Dict[GridKey, float | None] = {}
    for o in orientations:
        for tap in tap_grid(ctx.config.timesteps):
            if task is Task.CLASSIFICATION:
                grid[(o, tap)] = _val_auroc(_stage1(ctx, store, o, tap, setting), store)
            else:
                grid[(o, tap)] = _segmentation(ctx, store, o, tap)[1]
            logger.info(f"{o.value} {tap}: {task.metric} {grid[(o, tap)]}")
    write_probe_grid(ctx.out / "probe_grid.csv", grid, task)
    store.assert_test_unread()
    ctx.results["taps"] = len(grid)


def cmd_select(ctx: Context) -> None:
    store = ctx.store()
    setting = Setting(ctx.args.setting)
    grid, task = read_probe_grid(ctx.args.grid)
    if task is Task.SEGMENTATION:
        selection = select_segmentation_taps(grid, setting)
    else:
        trained: Dict[GridKey, Stage1Result] = {}

        def evaluate_fused(taps: Dict[Orientation, TapPoint]) -> float | None:
            for key in taps.items():
                if key not in trained:
                    trained[key] = _stage1(ctx, store, key[0], key[1], setting)
            stage1 = {o: trained[(o, t)] for o, t in taps.items()}
            return _val_auroc(_train_fused(ctx, stage1, store), store)

        selection, candidates = select_config(grid, evaluate_fused, setting, ctx.config.shortlist)
        write_candidates(ctx.out / "candidates.csv", candidates)
        ctx.results["candidates"] = len(candidates)
    store.assert_test_unread()
    selection.write(ctx.out / "selection.json")
    ctx.results["taps"] = {o.value: str(t) for o, t in selection.taps.items()}
    ctx.results["score"] = selection.score


def cmd_finetune(ctx: Context) -> None:
    """Stage 1 at the chosen tap of each orientation, saved for fusion."""
    store = ctx.store()
    setting = Setting(ctx.args.setting)
    for o, tap in _taps(ctx).items():
        result = _stage1(ctx, store, o, tap, setting)
        save_stage1(ctx.out / o.value, result, ctx.backbone(o)[1].schedule)
        write_loss_curve(ctx.out / f"{o.value}_loss.csv", result.losses)
        ctx.results[f"{o.value}_val_macro_auroc"] = _val_auroc(result, store)
    store.assert_test_unread()


def cmd_fuse(ctx: Context) -> None:
    store = ctx.store()
    roots = {o: (ctx.args.stage1 / o.value).resolve() for o in ORIENTATIONS}
    stage1: Dict[Orientation, Stage1Result] = {}
    if ctx.args.ehr != "only":
        for root in roots.values():
            if not (root / MANIFEST_FILE).is_file():
                raise MissingUpstreamArtifact(str(root / MANIFEST_FILE))
        stage1 = load_stage1_set(roots)
    model = _train_fused(ctx, stage1, store)
    save_fused(ctx.out, model, roots if stage1 else None)
    ctx.results["val_macro_auroc"] = _val_auroc(model, store)
    store.assert_test_unread()


def cmd_segment(ctx: Context) -> None:
    store = ctx.store()
    taps = _taps(ctx)
    for o in _masked_orientations(store, Split.TRAIN):
        result, score = _segmentation(ctx, store, o, taps[o])
        save_segmentation(ctx.out / o.value, result, ctx.backbone(o)[1].schedule)
        write_loss_curve(ctx.out / f"{o.value}_loss.csv", result.losses)
        ctx.results[f"{o.value}_val_mean_dice"] = score
    store.assert_test_unread()


def _write_report(report: MetricReport, out: Path, name: str) -> None:
    report.to_json(out / f"{name}.json")
    report.to_csv(out / f"{name}.csv")


def _subgroup_reports(ctx: Context, preds: PatientPredictions, store: StudyStore) -> None:
    for attr in SUBGROUPS:
        groups: Dict[str, Set[str]] = {}
        for pid in preds.patient_ids:
            value = getattr(store.record(pid), attr)
            if value is not None:
                groups.setdefault(value, set()).add(pid)
        for value, ids in sorted(groups.items()):
            report = preds.restrict(ids).report(ctx.config.threshold)
            _write_report(report, ctx.out / "subgroups", f"{attr}_{value}")
            ctx.results[f"{attr}_{value}_macro_auroc"] = report.macro_auroc


def _evaluate_segmentation(ctx: Context, root: Path, store: StudyStore, name: str) -> None:
    result, _ = load_segmentation(root)
    dice = result.evaluate(store, store.records(Split.TEST))
    report = MetricReport(
        per_label={}, macro_auroc=None, dice=dice, mean_dice=_mean(list(dice.values()))
    )
    _write_report(report, ctx.out, name)
    ctx.results[f"{name}_mean_dice"] = report.mean_dice


def _load_classifier(root: Path, kind: str) -> Stage1Result | FusedModel:
    if kind == "stage1":
        return load_stage1(root)[0]
    if kind == "fusion":
        return load_fused(root)[0]
    raise ConfigurationError(f"{root} holds a {kind} artifact, not a classifier")


def _compare(ctx: Context, preds: PatientPredictions, base: PatientPredictions) -> None:
    """One-sided sign-flip test over labels that the model beats the baseline."""
    common = set(preds.patient_ids) & set(base.patient_ids)
    mine = preds.restrict(common).report(ctx.config.threshold)
    theirs = base.restrict(common).report(ctx.config.threshold)
    diff = [
        m.auroc - theirs.per_label[k].auroc  # type: ignore[operator]
        for k, m in mine.per_label.items()
        if m.auroc is not None and theirs.per_label[k].auroc is not None
    ]
    if not diff:
        logger.warning("No label has a defined AUROC for both models; comparison skipped")
        return
    p = permutation_test(diff, ctx.config.resamples, ctx.config.seed)
    comparison = {
        "patients": len(common),
        "macro_auroc": mine.macro_auroc,
        "baseline_macro_auroc": theirs.macro_auroc,
        "auroc_diff": diff,
        "p_value": p,
    }
    (ctx.out / "comparison.json").write_text(json.dumps(comparison, indent=1))
    logger.info(f"Model minus baseline AUROC over {len(diff)} labels: p = {p:.4g}")
    ctx.results["p_value"] = p


def cmd_evaluate(ctx: Context) -> None:
    """The only command that reads the test split."""
    store = ctx.store()
    store.unseal()
    root: Path = ctx.args.model
    if not (root / MANIFEST_FILE).is_file():
        parts = [o for o in ORIENTATIONS if (root / o.value / MANIFEST_FILE).is_file()]
        if not parts:
            raise MissingUpstreamArtifact(str(root / MANIFEST_FILE))
        for o in parts:
            _evaluate_segmentation(ctx, root / o.value, store, f"report_{o.value}")
        return
    kind = artifact_kind(root)
    if kind == "segmentation":
        _evaluate_segmentation(ctx, root, store, "report")
        return
    model = _load_classifier(root, kind)
    test = store.records(Split.TEST)
    preds = model.predict(store, test)
    report = preds.report(ctx.config.threshold)
    _write_report(report, ctx.out, "report")
    ctx.results["macro_auroc"] = report.macro_auroc
    _subgroup_reports(ctx, preds, store)
    if isinstance(model, MPAEResult):
        write_gate_weights(ctx.out / "gate_weights.csv", model.gate_weights(store, test))
    if ctx.args.baseline is not None:
        base = _load_classifier(ctx.args.baseline, artifact_kind(ctx.args.baseline))
        _compare(ctx, preds, base.predict(store, test))


def cmd_labeleff(ctx: Context) -> None:
    """Validation metric against label fraction, pretrained versus randomly initialized."""
    store = ctx.store()
    cfg = ctx.config
    setting = Setting(ctx.args.setting)
    task = Task(ctx.args.task)
    taps = _taps(ctx)
    orientations: Sequence[Orientation] = ORIENTATIONS
    if task is Task.SEGMENTATION:
        orientations = _masked_orientations(store, Split.TRAIN)
    scratch = {
        o: build_denoiser(ctx.backbone(o)[1].config, "scratch", cfg.seed, o.value)
        for o in orientations
    }

    def arm(pretrained: bool) -> Callable[[float], float | None]:
        def run(fraction: float) -> float | None:
            backbones = {o: None if pretrained else scratch[o] for o in orientations}
            if task is Task.SEGMENTATION:
                scores = [
                    _segmentation(ctx, store, o, taps[o], b, label_fraction=fraction)[1]
                    for o, b in backbones.items()
                ]
                return _mean([s for s in scores if s is not None])
            stage1 = {
                o: _stage1(ctx, store, o, taps[o], setting, b, label_fraction=fraction)
                for o, b in backbones.items()
            }
            return _val_auroc(_train_fused(ctx, stage1, store, label_fraction=fraction), store)

        return run

    points = label_efficiency_run(
        cfg.label_fractions, {"pretrained": arm(True), "scratch": arm(False)}, task.metric
    )
    write_curve(ctx.out / "label_efficiency.csv", points)
    store.assert_test_unread()
    for name in ("pretrained", "scratch"):
        ctx.results[f"{name}_drop"] = efficiency_drop(points, name)


COMMANDS: Final[Dict[str, Callable[[Context], None]]] = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "probe": cmd_probe,
    "select": cmd_select,
    "finetune": cmd_finetune,
    "fuse": cmd_fuse,
    "segment": cmd_segment,
    "evaluate": cmd_evaluate,
    "labeleff": cmd_labeleff,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", type=Path, required=True, help="output directory")
    common.add_argument("--config", type=Path, help="RunConfig JSON file")
    common.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key"
    )
    common.add_argument("--seed", type=int, help="run seed")
    common.add_argument(
        "--log-level", default="INFO", choices=("DEBUG", "INFO", "WARNING", "ERROR")
    )
    common.add_argument("--cache", action="store_true", help="skip the run if nothing changed")
    common.add_argument("--runs", type=Path, default=Path("runs"), help="run ledger directory")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", type=Path, required=True, help="dataset directory")

    backbone = argparse.ArgumentParser(add_help=False)
    backbone.add_argument(
        "--checkpoints", type=Path, required=True, help="pretrained denoisers, one per orientation"
    )
    backbone.add_argument("--feature-cache", type=Path, help="frozen feature cache directory")

    heads = argparse.ArgumentParser(add_help=False)
    heads.add_argument("--pooling", choices=[m.value for m in PoolingMethod])
    heads.add_argument("--fusion", choices=[s.value for s in FusionStrategy])

    def setting(p: argparse.ArgumentParser, default: Setting) -> None:
        p.add_argument("--setting", choices=[s.value for s in Setting], default=default.value)

    def task(p: argparse.ArgumentParser) -> None:
        p.add_argument(
            "--task", choices=[t.value for t in Task], default=Task.CLASSIFICATION.value
        )

    def taps(p: argparse.ArgumentParser) -> None:
        g = p.add_mutually_exclusive_group()
        g.add_argument("--selection", type=Path, help="selection.json from `select`")
        g.add_argument("--tap", default=DEFAULT_TAP, help="one tap for every orientation")

    parser = argparse.ArgumentParser(prog="planediff", description="Multi-plane diffusion features")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a phantom dataset")
    p.add_argument("--patients", type=int)
    p.add_argument("--multi-scan-fraction", type=float)

    p = sub.add_parser("pretrain", parents=[common, data], help="pretrain the denoisers")
    p.add_argument("--orientation", choices=[o.value for o in ORIENTATIONS])

    p = sub.add_parser("probe", parents=[common, data, backbone, heads], help="per-tap grid")
    setting(p, Setting.LP)
    task(p)

    p = sub.add_parser("select", parents=[common, data, backbone, heads], help="choose taps")
    p.add_argument("--grid", type=Path, required=True, help="probe_grid.csv from `probe`")
    setting(p, Setting.LP)

    p = sub.add_parser("finetune", parents=[common, data, backbone, heads], help="stage 1")
    setting(p, Setting.FT)
    taps(p)

    p = sub.add_parser("fuse", parents=[common, data, heads], help="stage 2")
    p.add_argument("--stage1", type=Path, required=True, help="output of `finetune`")
    p.add_argument("--ehr", choices=("joint", "only"), help="health-record arms")

    p = sub.add_parser("segment", parents=[common, data, backbone], help="segmentation")
    taps(p)

    p = sub.add_parser("evaluate", parents=[common, data], help="test-split metrics")
    p.add_argument("--model", type=Path, required=True, help="a trained model directory")
    p.add_argument("--baseline", type=Path, help="a classifier to test the model against")

    p = sub.add_parser(
        "labeleff", parents=[common, data, backbone, heads], help="label efficiency"
    )
    p.add_argument("--fractions", type=float, nargs="+")
    setting(p, Setting.FT)
    task(p)
    taps(p)
    return parser


def config_assignments(args: argparse.Namespace) -> List[str]:
    """Named flags as `--set` assignments; explicit `--set` values come last and win."""
    named = {
        "seed": ("seed", "phantom.seed"),
        "patients": ("phantom.n_patients",),
        "multi_scan_fraction": ("phantom.multi_scan_fraction",),
        "pooling": ("pooling",),
        "fusion": ("fusion",),
        "fractions": ("label_fractions",),
    }
    out: List[str] = []
    for attr, keys in named.items():
        value = getattr(args, attr, None)
        if value is not None:
            out.extend(f"{key}={json.dumps(value)}" for key in keys)
    return out + list(args.set)


def input_digests(args: argparse.Namespace) -> Dict[str, str]:
    digests: Dict[str, str] = {}
    for name in INPUT_ARGS:
        path = getattr(args, name, None)
        if path is None:
            continue
        if not path.exists():
            raise MissingUpstreamArtifact(str(path))
        digests[name] = directory_digest(path) if path.is_dir() else file_digest(path)
    return digests


def acquire_lock(out: Path) -> Path:
    """Create `out/.lock`; the caller removes it when the command ends."""
    path = out / LOCK_FILE
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError as e:
        raise RunLocked(f"{out} is in use by another run ({path} exists)") from e
    os.write(fd, str(os.getpid()).encode())
    os.close(fd)
    return path


def _up_to_date(out: Path, pending: RunManifest) -> bool:
    path = out / RUN_MANIFEST
    if not path.is_file():
        return False
    try:
        previous = RunManifest.read(path)
    except (ValidationError, ValueError, ManifestError) as e:
        logger.debug(f"Ignoring unreadable run manifest {path}: {e}")
        return False
    return (
        previous.cache_key() == pending.cache_key()
        and previous.outputs.get("out") == directory_digest(out)
    )


def _append_ledger(runs: Path, manifest: RunManifest, out: Path) -> None:
    runs.mkdir(parents=True, exist_ok=True)
    entry = {
        "command": manifest.command,
        "out": str(out.resolve()),
        "digest": manifest.digest,
        "config": manifest.config_digest,
        "wall_time_s": manifest.wall_time_s,
    }
    with open(runs / LEDGER_FILE, "a") as f:
        f.write(json.dumps(entry, sort_keys=True) + "\n")


def exit_code(e: Exception) -> EXIT:
    if isinstance(e, (ValidationError, ConfigurationError, MissingUpstreamArtifact)):
        return EXIT.USAGE
    return EXIT.RUNTIME


def _execute(args: argparse.Namespace) -> None:
    out: Path = args.out
    config = load_config(args.config, config_assignments(args))
    deterministic(config.seed)
    seeds = {
        "seed": config.seed,
        "noise_seed": config.noise_seed,
        "phantom": config.phantom.seed,
        "pretrain": config.pretrain.seed,
    }
    pending = RunManifest(
        command=args.command,
        seeds=seeds,
        config_digest=config.digest,
        inputs=input_digests(args),
        outputs={},
    )
    if args.cache and _up_to_date(out, pending):
        logger.info(f"{args.command}: {out} is up to date")
        return
    (out / ERROR_FILE).unlink(missing_ok=True)
    ctx = Context(args, config, out)
    start = time.perf_counter()
    COMMANDS[args.command](ctx)
    manifest = RunManifest(
        command=args.command,
        seeds=seeds,
        config_digest=config.digest,
        inputs=pending.inputs,
        outputs={"out": directory_digest(out)},
        results=ctx.results,
        wall_time_s=time.perf_counter() - start,
    )
    manifest.write(out / RUN_MANIFEST)
    _append_ledger(args.runs, manifest, out)
    logger.info(f"{args.command} finished in {manifest.wall_time_s:.1f}s")


def run(args: argparse.Namespace) -> EXIT:
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    try:
        lock = acquire_lock(out)
    except RunLocked as e:
        logger.error(str(e))
        return EXIT.RUNTIME
    try:
        _execute(args)
        return EXIT.OK
    except Exception as e:
        rc = exit_code(e)
        logger.error(f"{args.command} failed: {type(e).__name__}: {e}")
        logger.debug("Traceback", exc_info=True)
        ErrorReport(
            command=args.command,
            rc=rc,
            rsn=f"{type(e).__name__}: {e}",
            step=e.step if isinstance(e, DivergedLoss) else None,
            lr=e.lr if isinstance(e, DivergedLoss) else None,
        ).write(out / ERROR_FILE)
        return rc
    finally:
        lock.unlink(missing_ok=True)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format=LOG_FORMAT, stream=sys.stderr, force=True)
    return int(run(args))


if __name__ == "__main__":
    sys.exit(main())
