"""Command-line pipeline: pretrain -> finetune -> attack -> analyze, plus
the margin sweep and the four-trim ablation.

    unirobust <command> --config <path> [--seed N] [--out DIR]
                        [--override section.key=value]...

Configuration is an INI file with one section per stage (see
``configs/synthetic.ini``). Flags override config keys. Every stage is a
deterministic function of (config, input artifacts, seed); outputs land
under the --out directory in checkpoints/, logs/, and reports/, and
wall-clock timestamps are confined to a sidecar *_meta.json in logs/.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import sys
import time
from pathlib import Path

from .analysis import (
    DEFAULT_EPSILON_GRID,
    SweepSetup,
    boundary_stats,
    margin_sweep,
    propagation_curve,
    write_boundary_csv,
    write_propagation_csv,
    write_sweep_csv,
)
from .attacks import (
    RECIPE_KINDS,
    AttackRecipe,
    SynonymTable,
    evaluate_robustness,
    write_outcomes,
)
from .data import (
    Corpus,
    Tokenizer,
    build_vocab,
    default_synonym_table,
    ingest,
    synthetic_dataset,
    synthetic_pretrain_corpus,
)
from .model import ModelConfig, TransformerClassifier, load_checkpoint, \
    save_checkpoint
from .training import TRIMS, TrainPlan, finetune, pretrain, steps_for_epochs

COMMANDS = ("pretrain", "finetune", "attack", "analyze", "sweep", "ablation")


class ValidationError(ValueError):
    """A config value is missing or out of domain; names the field."""


class StageDependencyError(RuntimeError):
    """A required input artifact (checkpoint) does not exist."""


# -- typed config access -------------------------------------------------------

def _raw(cfg, section: str, key: str) -> str | None:
    if cfg.has_option(section, key):
        value = cfg.get(section, key).strip()
        return value if value else None
    return None


def _get_int(cfg, section, key, default=None, minimum=None):
    raw = _raw(cfg, section, key)
    if raw is None:
        if default is None:
            raise ValidationError(f"[{section}] {key} is required")
        return default
    try:
        value = int(raw)
    except ValueError:
        raise ValidationError(f"[{section}] {key} must be an integer, got {raw!r}")
    if minimum is not None and value < minimum:
        raise ValidationError(f"[{section}] {key} must be >= {minimum}")
    return value


def _get_float(cfg, section, key, default=None, minimum=None, maximum=None):
    raw = _raw(cfg, section, key)
    if raw is None:
        if default is None:
            raise ValidationError(f"[{section}] {key} is required")
        return default
    try:
        value = float(raw)
    except ValueError:
        raise ValidationError(f"[{section}] {key} must be a number, got {raw!r}")
    if minimum is not None and value < minimum:
        raise ValidationError(f"[{section}] {key} must be >= {minimum}")
    if maximum is not None and value > maximum:
        raise ValidationError(f"[{section}] {key} must be <= {maximum}")
    return value


def _get_bool(cfg, section, key, default):
    raw = _raw(cfg, section, key)
    if raw is None:
        return default
    lowered = raw.lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValidationError(f"[{section}] {key} must be a boolean, got {raw!r}")


def _get_str(cfg, section, key, default=None, choices=None):
    raw = _raw(cfg, section, key)
    if raw is None:
        if default is None:
            raise ValidationError(f"[{section}] {key} is required")
        return default
    if choices is not None and raw not in choices:
        raise ValidationError(f"[{section}] {key} must be one of {choices}, "
                              f"got {raw!r}")
    return raw


# -- shared pieces ---------------------------------------------------------------

def load_config(path: str, overrides: list[str], seed: int | None,
                command: str) -> configparser.ConfigParser:
    cfg = configparser.ConfigParser()
    read = cfg.read(path)
    if not read:
        raise ValidationError(f"config file not found: {path}")
    for item in overrides:
        key_part, sep, value = item.partition("=")
        section, dot, key = key_part.partition(".")
        if not sep or not dot:
            raise ValidationError(
                f"override must look like section.key=value, got {item!r}")
        if not cfg.has_section(section):
            cfg.add_section(section)
        cfg.set(section, key, value)
    if seed is not None:
        if not cfg.has_section(command):
            cfg.add_section(command)
        cfg.set(command, "seed", str(seed))
    return cfg


def ensure_layout(out: Path) -> dict[str, Path]:
    dirs = {name: out / name for name in ("checkpoints", "logs", "reports")}
    for path in dirs.values():
        path.mkdir(parents=True, exist_ok=True)
    return dirs


def write_meta(dirs, stage: str, payload: dict) -> None:
    payload = dict(payload)
    payload["stage"] = stage
    payload["timestamp"] = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
    with open(dirs["logs"] / f"{stage}_meta.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def make_model_config(cfg, vocab_size: int) -> ModelConfig:
    hidden = _get_int(cfg, "model", "hidden", 32, minimum=1)
    try:
        return ModelConfig(
            vocab_size=vocab_size,
            max_seq_len=_get_int(cfg, "model", "max_seq_len", 32, minimum=1),
            hidden=hidden,
            expand=_get_int(cfg, "model", "expand", 4 * hidden, minimum=1),
            layers=_get_int(cfg, "model", "layers", 3, minimum=1),
            heads=_get_int(cfg, "model", "heads", 2, minimum=1),
            num_classes=_get_int(cfg, "model", "num_classes", 2, minimum=2),
            token_types=_get_int(cfg, "model", "token_types", 2, minimum=1),
        )
    except ValueError as exc:
        raise ValidationError(f"[model] {exc}")


def load_labeled_data(cfg) -> tuple[Corpus, Corpus]:
    train_path = _raw(cfg, "data", "train_path")
    test_path = _raw(cfg, "data", "test_path")
    if train_path or test_path:
        if not (train_path and test_path):
            raise ValidationError("[data] train_path and test_path go together")
        return (ingest(train_path, "classification"),
                ingest(test_path, "classification"))
    return synthetic_dataset(
        n_classes=_get_int(cfg, "data", "synthetic_classes", 2, minimum=2),
        n_train=_get_int(cfg, "data", "train_size", 2000, minimum=1),
        n_test=_get_int(cfg, "data", "test_size", 500, minimum=1),
        seed=_get_int(cfg, "data", "data_seed", 0),
    )


def load_pretrain_data(cfg) -> Corpus:
    path = _raw(cfg, "data", "pretrain_path")
    if path:
        return ingest(path, "unlabeled")
    return synthetic_pretrain_corpus(
        n_sentences=_get_int(cfg, "data", "pretrain_size", 2000, minimum=1),
        seed=_get_int(cfg, "data", "data_seed", 0),
    )


def load_synonyms(cfg) -> SynonymTable:
    path = _raw(cfg, "data", "synonym_path")
    if path:
        return SynonymTable.from_file(path)
    return SynonymTable(default_synonym_table())


def load_model_checkpoint(path: Path) -> tuple[TransformerClassifier, Tokenizer]:
    if not path.exists():
        raise StageDependencyError(
            f"missing checkpoint {path}; run the producing stage first")
    model, tok_payload = load_checkpoint(path)
    if tok_payload is None:
        raise StageDependencyError(f"checkpoint {path} carries no tokenizer")
    return model, Tokenizer.from_dict(tok_payload)


def plan_from(cfg, section: str, phase: str, n_train: int | None = None,
              trim: str | None = None) -> TrainPlan:
    defaults = TrainPlan(phase=phase)
    batch_size = _get_int(cfg, section, "batch_size", defaults.batch_size,
                          minimum=1)
    if _raw(cfg, section, "total_steps") is not None:
        total = _get_int(cfg, section, "total_steps", minimum=1)
    elif n_train is not None:
        epochs = _get_int(cfg, section, "epochs", 5, minimum=1)
        total = steps_for_epochs(n_train, batch_size, epochs)
    else:
        total = defaults.total_steps
    try:
        plan = TrainPlan(
            phase=phase,
            loss=_get_str(cfg, section, "loss", defaults.loss,
                          choices=("cross_entropy", "multi_margin")),
            epsilon=_get_float(cfg, section, "epsilon", defaults.epsilon,
                               minimum=0.0),
            lr_peak=_get_float(cfg, section, "lr_peak", defaults.lr_peak,
                               minimum=0.0),
            warmup_steps=_get_int(cfg, section, "warmup_steps",
                                  min(defaults.warmup_steps, total), minimum=0),
            total_steps=total,
            beta1=_get_float(cfg, section, "beta1", defaults.beta1),
            beta2=_get_float(cfg, section, "beta2", defaults.beta2),
            weight_decay=_get_float(cfg, section, "weight_decay",
                                    defaults.weight_decay, minimum=0.0),
            batch_size=batch_size,
            mask_prob=_get_float(cfg, section, "mask_prob", defaults.mask_prob,
                                 minimum=0.0, maximum=1.0),
            unitary_enabled=_get_bool(cfg, section, "unitary_enabled", True),
            seed=_get_int(cfg, section, "seed", 0),
        )
    except ValueError as exc:
        raise ValidationError(f"[{section}] {exc}")
    if trim is not None:
        plan = plan.for_trim(trim)
    return plan


def recipes_from(cfg, section: str = "attack") -> dict[str, AttackRecipe]:
    names = _get_str(cfg, section, "recipes", "embed_synonym").split(",")
    budget_raw = _raw(cfg, "attack", "query_budget")
    recipes = {}
    for name in (n.strip() for n in names if n.strip()):
        if name not in RECIPE_KINDS:
            raise ValidationError(f"[{section}] recipes entry {name!r} must be "
                                  f"one of {RECIPE_KINDS}")
        try:
            recipes[name] = AttackRecipe(
                kind=name,
                query_budget=int(budget_raw) if budget_raw else None,
                similarity_threshold=_get_float(
                    cfg, "attack", "similarity_threshold", 0.8,
                    minimum=-1.0, maximum=1.0),
                max_perturb_fraction=_get_float(
                    cfg, "attack", "max_perturb_fraction", 0.4, minimum=0.0,
                    maximum=1.0),
                neighbor_count=_get_int(cfg, "attack", "neighbor_count", 8,
                                        minimum=0),
            )
        except ValueError as exc:
            raise ValidationError(f"[attack] {exc}")
    if not recipes:
        raise ValidationError(f"[{section}] recipes must name at least one recipe")
    return recipes


def attack_samples(cfg, test_set: Corpus, section: str = "attack"):
    n = _get_int(cfg, section, "samples", min(200, len(test_set)), minimum=1)
    return [(text, label) for text, label in test_set.samples[:n]]


def _write_trim_csv(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["trim", "pre_acc", "post_acc_typo", "post_acc_embed",
                         "post_acc_thesaurus"])
        for trim, pre, post in rows:
            writer.writerow([
                trim, f"{pre:.10g}",
                f"{post.get('typo', float('nan')):.10g}",
                f"{post.get('embed_synonym', float('nan')):.10g}",
                f"{post.get('thesaurus_synonym', float('nan')):.10g}",
            ])


# -- stages ---------------------------------------------------------------------

def stage_pretrain(cfg, dirs) -> None:
    corpus = load_pretrain_data(cfg)
    tokenizer = build_vocab(
        corpus,
        max_vocab=_get_int(cfg, "model", "max_vocab", 256, minimum=8),
        max_seq_len=_get_int(cfg, "model", "max_seq_len", 32, minimum=1))
    model = TransformerClassifier(
        make_model_config(cfg, tokenizer.vocab_size),
        seed=_get_int(cfg, "pretrain", "seed", 0))
    plan = plan_from(cfg, "pretrain", "pretrain")
    log = pretrain(model, corpus, tokenizer, plan)
    save_checkpoint(model, dirs["checkpoints"] / "pretrained.ckpt", tokenizer)
    log.write(dirs["logs"] / "pretrain.ndjson")
    write_meta(dirs, "pretrain", {"steps": plan.total_steps,
                                  "final_loss": log.losses()[-1]})


def stage_finetune(cfg, dirs) -> None:
    ckpt = Path(_get_str(cfg, "finetune", "checkpoint",
                         str(dirs["checkpoints"] / "pretrained.ckpt")))
    model, tokenizer = load_model_checkpoint(ckpt)
    train_set, _ = load_labeled_data(cfg)
    trim = _get_str(cfg, "finetune", "trim", "unitary_margin",
                    choices=tuple(TRIMS))
    plan = plan_from(cfg, "finetune", "finetune", n_train=len(train_set),
                     trim=trim)
    log = finetune(model, train_set, tokenizer, plan)
    save_checkpoint(model, dirs["checkpoints"] / f"finetuned_{trim}.ckpt",
                    tokenizer)
    log.write(dirs["logs"] / f"finetune_{trim}.ndjson")
    write_meta(dirs, "finetune", {"trim": trim, "steps": plan.total_steps,
                                  "final_loss": log.losses()[-1]})


def stage_attack(cfg, dirs) -> None:
    trim = _get_str(cfg, "finetune", "trim", "unitary_margin",
                    choices=tuple(TRIMS))
    ckpt = Path(_get_str(cfg, "attack", "checkpoint",
                         str(dirs["checkpoints"] / f"finetuned_{trim}.ckpt")))
    model, tokenizer = load_model_checkpoint(ckpt)
    _, test_set = load_labeled_data(cfg)
    samples = attack_samples(cfg, test_set)
    synonyms = load_synonyms(cfg)
    seed = _get_int(cfg, "attack", "seed", 0)
    rows = []
    for name, recipe in recipes_from(cfg).items():
        pre, post, outcomes = evaluate_robustness(
            model, tokenizer, samples, recipe, seed=seed, synonyms=synonyms)
        write_outcomes(outcomes, recipe, dirs["reports"] / f"attack_{name}.ndjson")
        rows.append((name, pre, post))
    with open(dirs["reports"] / "attack_summary.csv", "w", newline="",
              encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["recipe", "pre_acc", "post_acc"])
        for name, pre, post in rows:
            writer.writerow([name, f"{pre:.10g}", f"{post:.10g}"])
    write_meta(dirs, "attack", {"checkpoint": str(ckpt),
                                "samples": len(samples)})


def stage_analyze(cfg, dirs) -> None:
    trim = _get_str(cfg, "finetune", "trim", "unitary_margin",
                    choices=tuple(TRIMS))
    ckpt = Path(_get_str(cfg, "analyze", "checkpoint",
                         str(dirs["checkpoints"] / f"finetuned_{trim}.ckpt")))
    model, tokenizer = load_model_checkpoint(ckpt)
    _, test_set = load_labeled_data(cfg)
    stats = boundary_stats(model, tokenizer, test_set)
    write_boundary_csv(stats, dirs["reports"] / "boundary.csv")

    recipe_name = _get_str(cfg, "analyze", "recipe", "embed_synonym",
                           choices=RECIPE_KINDS)
    recipe = recipes_from(cfg, "analyze") \
        if _raw(cfg, "analyze", "recipes") else \
        {recipe_name: AttackRecipe(kind=recipe_name)}
    name, recipe = next(iter(recipe.items()))
    samples = attack_samples(cfg, test_set, section="analyze")
    _, _, outcomes = evaluate_robustness(
        model, tokenizer, samples, recipe,
        seed=_get_int(cfg, "analyze", "seed", 0), synonyms=load_synonyms(cfg))
    pairs = [(o.original_text, o.final_text) for o in outcomes
             if not o.skipped and o.final_text != o.original_text]
    if pairs:
        curve = propagation_curve(model, tokenizer,
                                  [p[0] for p in pairs], [p[1] for p in pairs])
        write_propagation_csv(curve, dirs["reports"] / f"propagation_{name}.csv")
    write_meta(dirs, "analyze", {"checkpoint": str(ckpt),
                                 "boundary_samples": stats.sample_count,
                                 "perturbed_pairs": len(pairs)})


def stage_sweep(cfg, dirs) -> None:
    ckpt = Path(_get_str(cfg, "sweep", "checkpoint",
                         str(dirs["checkpoints"] / "pretrained.ckpt")))
    model, tokenizer = load_model_checkpoint(ckpt)
    train_set, test_set = load_labeled_data(cfg)
    grid_raw = _raw(cfg, "sweep", "epsilons")
    grid = ([float(e) for e in grid_raw.split(",")] if grid_raw
            else list(DEFAULT_EPSILON_GRID))
    plan = plan_from(cfg, "finetune", "finetune", n_train=len(train_set))
    setup = SweepSetup(
        base_model=model,
        tokenizer=tokenizer,
        train_set=train_set,
        test_samples=attack_samples(cfg, test_set, section="sweep"),
        plan=plan,
        recipes=recipes_from(cfg, "sweep"),
        synonyms=load_synonyms(cfg),
        attack_seed=_get_int(cfg, "sweep", "seed", 0),
    )
    rows = margin_sweep(setup, grid)
    write_sweep_csv(rows, dirs["reports"] / "sweep.csv")
    write_meta(dirs, "sweep", {"grid": grid,
                               "failed_rows": sum(r.failed for r in rows)})


def stage_ablation(cfg, dirs) -> None:
    ckpt = Path(_get_str(cfg, "ablation", "checkpoint",
                         str(dirs["checkpoints"] / "pretrained.ckpt")))
    base_model, tokenizer = load_model_checkpoint(ckpt)
    train_set, test_set = load_labeled_data(cfg)
    samples = attack_samples(cfg, test_set, section="ablation")
    synonyms = load_synonyms(cfg)
    recipes = recipes_from(cfg, "ablation")
    seed = _get_int(cfg, "ablation", "seed", 0)
    rows = []
    for trim in TRIMS:
        plan = plan_from(cfg, "finetune", "finetune", n_train=len(train_set),
                         trim=trim)
        model = base_model.clone()
        finetune(model, train_set, tokenizer, plan)
        save_checkpoint(model, dirs["checkpoints"] / f"ablation_{trim}.ckpt",
                        tokenizer)
        correct = sum(1 for text, label in samples
                      if model.predict(tokenizer.encode(text)) == label)
        post = {}
        for name, recipe in recipes.items():
            _, post_acc, _ = evaluate_robustness(
                model, tokenizer, samples, recipe, seed=seed,
                synonyms=synonyms)
            post[name] = post_acc
        rows.append((trim, correct / len(samples), post))
    _write_trim_csv(dirs["reports"] / "ablation.csv", rows)
    write_meta(dirs, "ablation", {"trims": list(TRIMS),
                                  "samples": len(samples)})


STAGES = {
    "pretrain": stage_pretrain,
    "finetune": stage_finetune,
    "attack": stage_attack,
    "analyze": stage_analyze,
    "sweep": stage_sweep,
    "ablation": stage_ablation,
}


def run(command: str, config_path: str, seed: int | None = None,
        out: str = "out", overrides: list[str] | None = None) -> int:
    try:
        cfg = load_config(config_path, overrides or [], seed, command)
        dirs = ensure_layout(Path(out))
        STAGES[command](cfg, dirs)
    except (ValidationError, StageDependencyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="unirobust",
        description="config-driven train/attack/analyze pipeline")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="INI config file")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the stage seed")
    parser.add_argument("--out", default="out", help="output directory")
    parser.add_argument("--override", action="append", default=[],
                        metavar="SECTION.KEY=VALUE",
                        help="override a config value (repeatable)")
    args = parser.parse_args(argv)
    return run(args.command, args.config, seed=args.seed, out=args.out,
               overrides=args.override)


if __name__ == "__main__":
    sys.exit(main())
