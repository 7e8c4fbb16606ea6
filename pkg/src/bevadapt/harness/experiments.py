"""End-to-end experiment battery: the harness behind trend and ablation runs.

One battery at one root seed builds all corpora (shared eval scenes across
fog levels), pretrains on the clear source domain, adapts with the method
variants, and evaluates everything. Acceptance checks aggregate batteries
over several seeds.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

from ..numerics import ParameterSet, derive_seed, save_checkpoint
from ..synth import DomainShift, build_corpus
from .config import ExperimentConfig
from .divergence import DivergenceReport, divergence_report
from .metrics import MetricsReport, evaluate_checkpoint
from .train import run_adaptation, train_source, write_lines

VARIANTS: dict[str, dict[str, bool]] = {
    # Full method and its two pathways; source_only is the unadapted model.
    "full": dict(da=True, uema=True, kt=True, ba=True, ia=True, va=True),
    "rdt": dict(da=True, uema=True, kt=True, ba=False, ia=False, va=False),
    "gcs": dict(da=False, uema=False, kt=False, ba=True, ia=True, va=True),
}

FOG_EVAL_LEVELS = (1, 3, 5)


@dataclass
class BatteryResult:
    root_seed: int
    metrics: dict[str, MetricsReport] = field(default_factory=dict)
    divergence: dict[str, DivergenceReport] = field(default_factory=dict)
    paths: dict[str, str] = field(default_factory=dict)

    def simplified_map(self, run: str) -> float:
        return self.metrics[run].simplified_map


def build_battery_corpora(config: ExperimentConfig, root_seed: int, workdir: str) -> dict[str, str]:
    """Source/target training corpora plus fog-ladder evals on shared scenes."""
    os.makedirs(workdir, exist_ok=True)
    v = config.values
    paths: dict[str, str] = {}
    spec = config.scene_spec()
    none_shift = DomainShift(kind="none")
    paths["source_train"] = os.path.join(workdir, "source_train.corpus")
    build_corpus(
        spec,
        none_shift,
        v["scene.n_scenes"],
        derive_seed(root_seed, "corpus", "source_train"),
        paths["source_train"],
        labeled=True,
    )
    paths["target_train"] = os.path.join(workdir, "target_train.corpus")
    build_corpus(
        spec,
        config.domain_shift(),
        v["scene.n_scenes"],
        derive_seed(root_seed, "corpus", "target_train"),
        paths["target_train"],
        labeled=False,
    )
    eval_seed = derive_seed(root_seed, "corpus", "eval")
    for level in FOG_EVAL_LEVELS:
        name = f"eval_f{level}"
        paths[name] = os.path.join(workdir, f"{name}.corpus")
        build_corpus(
            spec,
            config.domain_shift(level=level),
            v["scene.n_eval_scenes"],
            eval_seed,
            paths[name],
            labeled=False,
        )
    return paths


def run_battery(config: ExperimentConfig, root_seed: int, workdir: str) -> BatteryResult:
    v = config.values
    dims = config.model_dims()
    result = BatteryResult(root_seed=root_seed)
    result.paths = build_battery_corpora(config, root_seed, workdir)

    source_params, source_logs = train_source(
        result.paths["source_train"],
        dims,
        epochs=v["train.epochs"],
        lr=v["train.lr"],
        seed=derive_seed(root_seed, "train_source"),
        batch_size=v["train.batch_size"],
        depth_weight=v["train.depth_weight"],
        lidar_sub_prob=v["train.lidar_sub_prob"],
    )
    ckpt_path = os.path.join(workdir, "source.ckpt")
    save_checkpoint(source_params, ckpt_path)
    write_lines(source_logs, os.path.join(workdir, "train_source.csv"))
    result.paths["source_ckpt"] = ckpt_path

    students: dict[str, ParameterSet] = {"source_only": source_params}
    for name, switches in VARIANTS.items():
        variant_cfg = config.with_overrides(
            **{f"ablation.{k}": val for k, val in switches.items()}
        )
        adapted = run_adaptation(
            result.paths["source_train"],
            result.paths["target_train"],
            source_params,
            variant_cfg.adapt_config(seed=derive_seed(root_seed, "adapt", name)),
            epochs=v["adapt.epochs"],
            batch_size=v["adapt.batch_size"],
        )
        students[name] = adapted.student
        student_path = os.path.join(workdir, f"{name}_student.ckpt")
        save_checkpoint(adapted.student, student_path)
        save_checkpoint(adapted.teacher, os.path.join(workdir, f"{name}_teacher.ckpt"))
        write_lines(adapted.logs, os.path.join(workdir, f"{name}_adapt.csv"))
        result.paths[f"{name}_student"] = student_path

    eval_plan = {name: [3] for name in students}
    eval_plan["source_only"] = list(FOG_EVAL_LEVELS)
    eval_plan["full"] = list(FOG_EVAL_LEVELS)
    for name, levels in eval_plan.items():
        for level in levels:
            run = f"{name}@fog{level}"
            result.metrics[run] = evaluate_checkpoint(
                students[name],
                result.paths[f"eval_f{level}"],
                dims,
                match_radius=v["eval.match_radius"],
                occ_threshold=v["eval.occ_threshold"],
                occ_floor=v["eval.occ_floor"],
            )

    for name in ("source_only", "full"):
        result.divergence[name] = divergence_report(
            students[name],
            result.paths["source_train"],
            result.paths["target_train"],
            dims,
            space=v["divergence.space"],
            bins=v["divergence.bins"],
            probe_steps=v["divergence.probe_steps"],
            probe_lr=v["divergence.probe_lr"],
            seed=derive_seed(root_seed, "divergence", name),
        )
    return result
