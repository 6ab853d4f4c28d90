# controller.py
import hashlib
import json
from pathlib import Path
from typing import Any, Callable, List, Optional, Sequence

import numpy as np
import pandas as pd
from logzero import logger
from tabulate import tabulate

from .augment import center_crop_resize
from .checkpoint import load_checkpoint
from .config import ExperimentConfig
from .data import (
    ImageCache,
    SliceSpec,
    SplitSpec,
    load_image,
    read_manifest,
    save_image,
    scan_directory,
    slice_directory,
    split_capped,
    synth_dataset,
    write_manifest,
)
from .db import Phase, RunStatus, create_db_and_tables, get_session, make_engine
from .errors import ConfigurationError, GrapeMaeError, InputError, UsageError
from .evaluation import (
    MetricsReport,
    attention_maps,
    cka_heatmap,
    confusion_matrix_export,
    export_attention,
    log_report,
    write_class_accuracy_csv,
    write_cka_csv,
    write_metrics_csv,
)
from .models.mae import reconstruct
from .run_service import RunService
from .training import (
    classifier_from_checkpoint,
    encoder_from_checkpoint,
    evaluate_items,
    finetune,
    mae_from_checkpoint,
    pretrain,
    stream,
)

# sweep axis -> config key it varies
SWEEP_KEYS = {
    "mask_ratio": "mask_ratio",
    "aug_strength": "pretrain_aug",
    "label_fraction": "label_fraction",
    "pretrain_epochs": "pretrain_epochs",
}


class ExperimentController:
    def __init__(self, cfg: ExperimentConfig, progress: bool = True):
        self.cfg = cfg
        self.progress = progress
        self.out = cfg.out_path
        self.out.mkdir(parents=True, exist_ok=True)

        # ---- Run registry ----
        self.engine = make_engine(db_url=cfg.registry_url)
        create_db_and_tables(self.engine)
        self.runs = RunService(lambda: get_session(self.engine))

    # ---- Command dispatch ----
    def call_command(self, name: str, *args, **kwargs) -> int:
        """Run cmd_<name>; domain and usage errors are logged and mapped to the exit status."""
        fn: Optional[Callable] = getattr(self, f"cmd_{name}", None)
        if not callable(fn):
            logger.error(f"[commands] Unknown command: {name}")
            return UsageError.exit_code
        try:
            fn(*args, **kwargs)
            return 0
        except GrapeMaeError as e:
            logger.error(f"[{name}] {e}")
            for item in getattr(e, "offending", []):
                logger.error(f"[{name}]   {item}")
            return e.exit_code

    def _tracked(self, command: str, phase: Phase, cfg: ExperimentConfig, fn: Callable[[], tuple], config_hash: str = ""):
        """Run `fn` -> (checkpoint path, summary dict, value) as a registry entry; returns value."""
        run_id = self.runs.start_run(command, phase, cfg.preset_key, cfg.seed, config_hash, str(cfg.out_dir))
        try:
            ckpt, summary, value = fn()
        except GrapeMaeError as e:
            self.runs.fail_run(run_id, str(e))
            raise
        self.runs.finish_run(run_id, checkpoint_path=str(ckpt or ""), metrics=summary)
        return value

    # ---- Data commands ----
    def cmd_synth(self, root: str, num_classes: int = 8, per_class: int = 64, image_size: int = 32) -> None:
        synth_dataset(root, num_classes, per_class, image_size, seed=self.cfg.seed)

    def cmd_split(self, data_dir: Optional[str] = None, cap_factor: float = 4.0, group_by_prefix: bool = False) -> SplitSpec:
        dataset = scan_directory(data_dir or self.cfg.data_dir, group_from="prefix" if group_by_prefix else None)
        split = split_capped(dataset, cap_factor=cap_factor, seed=self.cfg.seed)
        path = write_manifest(split, Path(self.cfg.manifest) if self.cfg.manifest else self.out / "split.csv")
        counts = split.counts()
        rows = [[name] + [counts[s][c] for s in ("train", "val", "test")] for c, name in enumerate(split.class_names)]
        logger.info("[split] per-class counts\n" + tabulate(rows, headers=["class", "train", "val", "test"], tablefmt="orgtbl"))
        logger.info(f"[split] manifest written to {path}")
        return split

    def cmd_slice(self, src: str, dst: str, side: int, max_overlap: float = 0.10) -> int:
        return slice_directory(src, dst, SliceSpec(side, max_overlap))

    # ---- Training commands ----
    def cmd_pretrain(self, cfg: Optional[ExperimentConfig] = None) -> Path:
        cfg = cfg or self.cfg
        resume = load_checkpoint(cfg.resume_checkpoint) if cfg.resume_checkpoint else None

        def run():
            result = pretrain(cfg, cfg.out_path, resume=resume, progress=self.progress)
            last = result.state.history[-1] if result.state.history else {}
            return result.checkpoint_path, {"final_loss": last.get("mean_loss")}, result.checkpoint_path

        return self._tracked("pretrain", Phase.PRETEXT, cfg, run, config_hash=cfg.pretext_hash())

    def _split(self, cfg: ExperimentConfig) -> SplitSpec:
        if cfg.manifest and Path(cfg.manifest).exists():
            return read_manifest(cfg.manifest)
        path = cfg.out_path / "split.csv"
        if path.exists():
            return read_manifest(path)
        logger.info(f"[split] no manifest given; splitting {cfg.data_dir}")
        split = split_capped(scan_directory(cfg.data_dir), seed=cfg.seed)
        write_manifest(split, path)
        return split

    def cmd_finetune(self, cfg: Optional[ExperimentConfig] = None) -> Path:
        cfg = cfg or self.cfg
        split = self._split(cfg)
        init = load_checkpoint(cfg.init_checkpoint) if cfg.init_checkpoint else None
        resume = load_checkpoint(cfg.resume_checkpoint) if cfg.resume_checkpoint else None

        def run():
            result = finetune(cfg, split, cfg.out_path, init=init, resume=resume, progress=self.progress)
            summary = {"best_val_macro_f1": result.state.best_score, "best_epoch": result.state.best_epoch}
            return result.best_path, summary, result.best_path

        return self._tracked("finetune", Phase.DOWNSTREAM, cfg, run)

    # ---- Evaluation commands ----
    def cmd_eval(self, cfg: Optional[ExperimentConfig] = None) -> MetricsReport:
        cfg = cfg or self.cfg
        if not cfg.eval_checkpoint:
            raise ConfigurationError("eval needs a checkpoint (--checkpoint or config 'eval_checkpoint')")
        model, _, class_names = classifier_from_checkpoint(load_checkpoint(cfg.eval_checkpoint))
        split = self._split(cfg)
        if len(split.class_names) != len(class_names):
            raise InputError(f"split has {len(split.class_names)} classes, checkpoint {len(class_names)}")
        items = split.subset(cfg.eval_split)

        def run():
            cm, report = evaluate_items(
                model, items, class_names, ImageCache(), cfg.effective_batch_size, cfg.accuracy_threshold, cfg.weighted_average
            )
            out = cfg.out_path
            write_metrics_csv(report, class_names, out / f"metrics_{cfg.eval_split}.csv")
            write_class_accuracy_csv(report, class_names, out / f"class_accuracy_{cfg.eval_split}.csv")
            low = pd.DataFrame(
                {"class": [class_names[c] for c in report.low_accuracy], "accuracy": report.class_accuracy[report.low_accuracy]}
            )
            low.to_csv(out / f"low_accuracy_{cfg.eval_split}.csv", index=False)
            confusion_matrix_export(cm, out / f"confusion_{cfg.eval_split}.csv", out / f"confusion_{cfg.eval_split}.png")
            log_report(report, class_names, cfg.accuracy_threshold)
            return cfg.eval_checkpoint, report.summary(), report

        return self._tracked("eval", Phase.EVAL, cfg, run)

    def _analysis_images(self, cfg: ExperimentConfig, image_size: int, limit: int) -> np.ndarray:
        split = self._split(cfg)
        items = split.subset(cfg.eval_split) or split.items
        if len(items) > limit:
            pick = np.sort(stream(cfg.seed, "sample").choice(len(items), size=limit, replace=False))
            items = [items[i] for i in pick]
        cache = ImageCache()
        return np.stack([center_crop_resize(cache.get(it.path), image_size) for it in items])

    def cmd_cka(self, checkpoint_a: str, checkpoint_b: Optional[str] = None) -> np.ndarray:
        model_a, cfg_a = encoder_from_checkpoint(load_checkpoint(checkpoint_a))
        model_b = model_a
        if checkpoint_b:
            model_b, cfg_b = encoder_from_checkpoint(load_checkpoint(checkpoint_b))
            if cfg_b.image_size != cfg_a.image_size:
                raise InputError(f"checkpoints use different image sizes ({cfg_a.image_size} vs {cfg_b.image_size})")
        images = self._analysis_images(self.cfg, cfg_a.image_size, self.cfg.cka_images)
        if len(images) < self.cfg.cka_images:
            logger.warning(f"[cka] only {len(images)} images available; using all of them")
        heat = cka_heatmap(model_a, model_b, images)
        write_cka_csv(heat, len(images), self.out / "cka.csv")
        logger.info(f"[cka] {heat.shape[0]}×{heat.shape[1]} heatmap over {len(images)} images written to {self.out / 'cka.csv'}")
        return heat

    def cmd_attn(self, checkpoint: str, images: Sequence[str]) -> List[Path]:
        model, cfg = encoder_from_checkpoint(load_checkpoint(checkpoint))
        written: List[Path] = []
        for path in images:
            image = center_crop_resize(load_image(path), cfg.image_size)
            maps = attention_maps(model, image)
            written += export_attention(maps, image, self.out / "attn", stem=Path(path).stem)
        logger.info(f"[attn] wrote {len(written)} images ({model.config.heads} heads per input) to {self.out / 'attn'}")
        return written

    def cmd_reconstruct(self, checkpoint: str, count: int = 4) -> List[Path]:
        """Side-by-side original | masked | reconstruction for a few test images."""
        mae, cfg = mae_from_checkpoint(load_checkpoint(checkpoint))
        images = self._analysis_images(self.cfg, cfg.image_size, count)
        masked, merged = reconstruct(mae, images, seed=stream(self.cfg.seed, "mask"))
        written = []
        for i in range(len(images)):
            panel = np.concatenate([images[i], masked[i], merged[i]], axis=1)
            written.append(save_image(self.out / "reconstruct" / f"sample_{i:02d}.png", panel))
        logger.info(f"[reconstruct] wrote {len(written)} panels to {self.out / 'reconstruct'}")
        return written

    # ---- Sweeps ----
    def cmd_sweep(self, axis: Optional[str] = None, values: Optional[Sequence[Any]] = None) -> Path:
        """Full pre-text → downstream → eval chain per (value, seed); failures are recorded and skipped."""
        base = self.cfg.replace(sweep_axis=axis or self.cfg.sweep_axis)
        axis = base.sweep_axis
        values = list(values if values is not None else base.sweep_values)
        if not values:
            raise ConfigurationError("sweep needs at least one value")
        key = SWEEP_KEYS[axis]
        # every value must form a valid config before the first run starts
        for value in values:
            base.replace(**{key: value})
        manifest = base.manifest or str(self.out / "sweep" / "split.csv")
        if not Path(manifest).exists():
            write_manifest(split_capped(scan_directory(base.data_dir), seed=base.seed), manifest)

        sweep_id = hashlib.sha256(json.dumps([axis, values, base.seeds, base.to_dict()], sort_keys=True, default=str).encode()).hexdigest()[:12]
        rows = []
        for value in values:
            for seed in base.seeds:
                run_dir = self.out / "sweep" / f"{axis}_{value}" / f"seed_{seed}"
                cfg = base.replace(**{key: value}, seed=seed, manifest=manifest, out_dir=str(run_dir), resume_checkpoint=None)
                try:
                    f1 = self._sweep_point(cfg)
                    status = RunStatus.COMPLETED
                    error = ""
                except GrapeMaeError as e:
                    logger.error(f"[sweep] {axis}={value} seed={seed} failed: {e}")
                    f1, status, error = None, RunStatus.FAILED, str(e)
                self.runs.record_point(sweep_id, axis, value, seed, f1, status, error)
                rows.append({"axis": axis, "value": value, "seed": seed, "macro_f1": f1, "status": status.value})
        path = self.out / f"sweep_{axis}.csv"
        pd.DataFrame(rows, columns=["axis", "value", "seed", "macro_f1", "status"]).to_csv(path, index=False)
        logger.info("[sweep] results\n" + tabulate(rows, headers="keys", tablefmt="orgtbl", floatfmt=".4f"))
        return path

    def _sweep_point(self, cfg: ExperimentConfig) -> float:
        pretext_dir = self.out / "sweep" / "pretext" / cfg.pretext_hash()
        cached = self.runs.cached_pretext(cfg.pretext_hash())
        if cached and Path(cached).exists():
            logger.info(f"[sweep] reusing pre-text checkpoint {cached}")
        else:
            cached = str(self.cmd_pretrain(cfg.replace(out_dir=str(pretext_dir))))
        best = self.cmd_finetune(cfg.replace(init_checkpoint=cached))
        return self.cmd_eval(cfg.replace(eval_checkpoint=str(best), eval_split="test")).macro_f1
