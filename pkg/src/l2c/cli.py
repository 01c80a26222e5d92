"""Command-line surface: ensemble, synth, train, adapt, eval, gradcheck.

Every command reads an optional JSON config file, applies command-line
overrides on top, echoes the resolved config into its output directory,
and stages output dirs next to their target so a crash never publishes a
half-written artifact.

Exit codes: 0 success, 1 usage error, 2 validation/load failure,
3 numerical failure (non-finite values, failed gradient check).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import shutil
import sys
from pathlib import Path

import numpy as np

from . import runtime, tape
from .errors import L2CError, NonFiniteError, ValidationError
from .model import Model, ModelConfig
from .numerics import grad_check
from .store import (
    Checkpoint,
    checkpoint_hash,
    load_checkpoint,
    load_prompt,
    save_checkpoint,
    save_prompt,
    write_json,
)
from .store import load_bundle
from .synth import SynthConfig, generate, load_dataset, save_dataset
from .text import ensemble_trace, greedy_ensemble, save_prototypes
from .trainer import TrainConfig, fit, sample_episode
from .runtime import DEFAULT_SUPPORT_SIZE, AdaptedModel, adapt, evaluate

GRADCHECK_THRESHOLD = 1e-4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so codes stay ours."""

    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# config plumbing


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config file {p} is not valid JSON: {exc}")
    if not isinstance(raw, dict):
        raise ValidationError(f"config file {p} must hold a JSON object")
    return raw


def _resolve_seed(flag_seed, file_cfg: dict, default: int) -> int:
    if flag_seed is not None:
        return flag_seed
    if "seed" in file_cfg:
        return int(file_cfg["seed"])
    env = os.environ.get("L2C_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ValidationError(f"L2C_SEED must be an integer, got {env!r}")
    return default


def _build_dataclass(cls, file_cfg: dict, overrides: dict):
    """Defaults <- config file <- explicit flags, restricted to cls fields."""
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {k: v for k, v in file_cfg.items() if k in names}
    kwargs.update({k: v for k, v in overrides.items()
                   if k in names and v is not None})
    return cls(**kwargs)


def _check_known_keys(file_cfg: dict, *classes, extra=()):
    known = set(extra)
    for cls in classes:
        known |= {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(file_cfg) - known)
    if unknown:
        raise ValidationError(f"unknown config key {unknown[0]!r}")


def _publish(out, config_echo: dict, builder) -> None:
    """builder(stage_path) writes the artifact; then echo config + rename."""
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    stage = out.with_name(out.name + ".stage")
    if stage.exists():
        shutil.rmtree(stage)
    try:
        builder(stage)
        write_json(stage / "config.json", config_echo)
    except BaseException:
        shutil.rmtree(stage, ignore_errors=True)
        raise
    if out.exists():
        shutil.rmtree(out)
    os.rename(stage, out)


# ---------------------------------------------------------------------------
# commands


def cmd_ensemble(args) -> int:
    bundle = load_bundle(args.bundle)
    prototypes = greedy_ensemble(bundle, criterion=args.criterion, t=args.t)
    trace = ensemble_trace(bundle, prototypes.selected_template_indices,
                           criterion=args.criterion, t=args.t)
    report = {
        "criterion": args.criterion,
        "t": args.t,
        "num_templates": bundle.num_templates,
        "selected_template_indices": [
            int(i) for i in prototypes.selected_template_indices],
        "trace": trace,
        "final_value": trace[-1],
    }
    echo = {"command": "ensemble", "bundle": str(args.bundle),
            "criterion": args.criterion, "t": args.t}

    def builder(stage):
        save_prototypes(prototypes, stage)
        write_json(stage / "report.json", report)

    _publish(args.out, echo, builder)
    print(f"kept {len(trace)} of {bundle.num_templates} templates; "
          f"final {args.criterion} {trace[-1]:.6g}")
    return 0


def cmd_synth(args) -> int:
    file_cfg = _load_config_file(args.config)
    _check_known_keys(file_cfg, SynthConfig)
    seed = _resolve_seed(args.seed, file_cfg, SynthConfig().seed)
    cfg = _build_dataclass(SynthConfig, file_cfg, {
        "seed": seed,
        "n_domains": args.domains,
        "n_classes": args.classes,
        "domain_shift": args.domain_shift,
        "noise": args.noise,
        "samples_per_class": args.samples_per_class,
    })
    dataset = generate(cfg)
    echo = {"command": "synth", **dataclasses.asdict(cfg)}
    _publish(args.out, echo, lambda stage: save_dataset(dataset, stage))
    print(f"generated {dataset.grids.shape[0]} samples over "
          f"{cfg.n_domains} domains ({cfg.n_target_domains} held out)")
    return 0


def _train_configs(args):
    file_cfg = _load_config_file(args.config)
    _check_known_keys(file_cfg, TrainConfig, ModelConfig, extra=("max_steps",))
    seed = _resolve_seed(args.seed, file_cfg, TrainConfig().seed)
    lam = 0.0 if args.no_uniformity else args.lam
    tcfg = _build_dataclass(TrainConfig, file_cfg, {
        "seed": seed,
        "learning_rate": args.lr,
        "epochs": args.epochs,
        "lam": lam,
        "criterion": args.criterion,
        "sampling": args.sampling,
        "ensemble": args.ensemble,
    })
    model_overrides = {
        "use_daf": False if args.no_daf else None,
        "use_revert_attention": False if args.no_revert_attention else None,
        "use_refinement": False if args.no_refinement else None,
        "task": tcfg.task,
    }
    if "init_seed" not in file_cfg and args.init_seed is None:
        model_overrides["init_seed"] = seed
    elif args.init_seed is not None:
        model_overrides["init_seed"] = args.init_seed
    max_steps = args.max_steps if args.max_steps is not None \
        else file_cfg.get("max_steps")
    return file_cfg, tcfg, model_overrides, max_steps


def cmd_train(args) -> int:
    dataset = load_dataset(args.dataset)
    file_cfg, tcfg, model_overrides, max_steps = _train_configs(args)
    sc = dataset.config
    mcfg = _build_dataclass(ModelConfig, file_cfg, {
        "dim": sc.dim, "num_patches": sc.num_patches,
        "patch_width": sc.patch_width, "num_classes": sc.n_classes,
        **model_overrides,
    })
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp_log = out.with_name(out.name + ".log.tmp")
    try:
        model, ckpt = fit(dataset, tcfg, model_config=mcfg, log_path=tmp_log,
                          max_steps=max_steps)
        echo = {"command": "train", "dataset": str(args.dataset),
                "max_steps": max_steps,
                "train": dataclasses.asdict(tcfg),
                "model": dataclasses.asdict(mcfg)}

        def builder(stage):
            save_checkpoint(ckpt, stage)
            shutil.move(str(tmp_log), str(stage / "train_log.csv"))

        _publish(out, echo, builder)
    finally:
        if tmp_log.exists():
            tmp_log.unlink()
    print(f"trained checkpoint written to {out}")
    return 0


def _draw_support(dataset, domain: int, count: int, seed: int) -> np.ndarray:
    pool = dataset.domain_indices(domain)
    if pool.size == 0:
        raise ValidationError(f"domain {domain} has no samples")
    if pool.size < count:
        raise ValidationError(
            f"domain {domain} has {pool.size} samples, support needs {count}")
    rng = np.random.default_rng(seed)
    idx = rng.choice(pool, size=count, replace=False)
    return dataset.grids[idx]


def cmd_adapt(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.dataset)
    seed = _resolve_seed(args.seed, {}, 0)
    support = _draw_support(dataset, args.domain, args.support, seed)
    adapted = adapt(ckpt, support)
    if adapted.prompt is None:
        raise ValidationError(
            "checkpoint was trained without fusion; no prompt to write")
    source = checkpoint_hash(args.checkpoint)
    echo = {"command": "adapt", "checkpoint": str(args.checkpoint),
            "dataset": str(args.dataset), "domain": args.domain,
            "support": args.support, "seed": seed,
            "source_checkpoint": source}
    _publish(args.out, echo,
             lambda stage: save_prompt(adapted.prompt, stage,
                                       source_checkpoint=source))
    print(f"domain prompt for domain {args.domain} written to {args.out}")
    return 0


def _adapted_for_domain(ckpt, dataset, domain, support, seed):
    grids = _draw_support(dataset, domain, support, seed)
    return adapt(Model.from_checkpoint(ckpt), grids)


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.dataset)
    metrics = tuple(m.strip() for m in args.metrics.split(",") if m.strip())
    seed = _resolve_seed(args.seed, {}, 0)
    use_daf = ckpt.config.get("model", {}).get("use_daf", True)

    if args.prompt is not None:
        if args.domain is None:
            raise ValidationError("--prompt evaluation needs --domain")
        prompt, sidecar = load_prompt(args.prompt)
        recorded = sidecar.get("source_checkpoint", "")
        if recorded and recorded != checkpoint_hash(args.checkpoint):
            raise ValidationError(
                "prompt was computed from a different checkpoint")
        model = Model.from_checkpoint(ckpt)
        model.cache.drop()
        domain_models = {args.domain: AdaptedModel(model, prompt,
                                                   sidecar["cache_size"])}
    else:
        domains = [args.domain] if args.domain is not None \
            else dataset.target_domains
        domain_models = {
            d: _adapted_for_domain(ckpt, dataset, d,
                                   args.support if use_daf else 1, seed + d)
            for d in domains
        }

    per_domain = {}
    all_labels, all_preds, all_groups = [], [], []
    for domain, adapted in domain_models.items():
        idx = dataset.domain_indices(domain)
        grids = dataset.grids[idx]
        labels = dataset.class_ids[idx]
        wanted = tuple(m for m in metrics if m != "worst_group_accuracy")
        per_domain[str(domain)] = evaluate(adapted, grids, labels,
                                           metrics=wanted)
        preds = runtime.predict(adapted, grids)
        all_labels.append(labels)
        all_preds.append(preds)
        all_groups.append(np.full(idx.size, domain))

    labels = np.concatenate(all_labels)
    preds = np.concatenate(all_preds)
    groups = np.concatenate(all_groups)
    overall = {}
    for metric in metrics:
        if metric == "accuracy":
            overall[metric] = runtime.accuracy(labels, preds)
        elif metric == "macro_f1":
            overall[metric] = runtime.macro_f1(labels, preds)
        elif metric == "worst_group_accuracy":
            overall[metric] = runtime.worst_group_accuracy(labels, preds,
                                                           groups)
        elif metric == "pearson_r":
            overall[metric] = runtime.pearson_r(labels, preds)
        else:
            raise ValidationError(f"unknown metric {metric!r}")
    report = {"overall": overall, "per_domain": per_domain, "seed": seed}
    echo = {"command": "eval", "checkpoint": str(args.checkpoint),
            "dataset": str(args.dataset), "metrics": list(metrics),
            "domain": args.domain, "support": args.support, "seed": seed,
            "prompt": None if args.prompt is None else str(args.prompt)}

    def builder(stage):
        stage.mkdir(parents=True, exist_ok=True)
        write_json(stage / "metrics.json", report)
        lines = ["domain," + ",".join(overall)]
        for domain, row in per_domain.items():
            lines.append(domain + "," + ",".join(
                "" if m not in row else repr(row[m]) for m in overall))
        (stage / "per_domain.csv").write_text("\n".join(lines) + "\n")

    _publish(args.out, echo, builder)
    shown = ", ".join(f"{k}={v:.4f}" for k, v in overall.items())
    print(f"eval over domains {sorted(domain_models)}: {shown}")
    return 0


# Central differences at eps=1e-5 on a loss of magnitude ~7 carry roundoff
# noise around 1e-10 per entry. A gradient entry must sit well above that
# for the relative comparison to be meaningful, so the harness checks at a
# perturbed parameter point whose smallest analytic gradient entry clears
# this floor. Selection uses analytic gradients only; a wrong gradient
# still fails the finite-difference comparison at any point.
_GRADCHECK_MIN_ENTRY = 1.5e-6


def _generic_point(build_model, loss_of, tries: int = 40):
    """Return a model at a well-conditioned point for finite differences.

    Perturbs a fresh model by seeded Gaussian noise and accepts the first
    candidate whose smallest gradient entry exceeds the noise floor. Falls
    back to the best candidate seen so that a structurally zero gradient
    (a genuine bug) still reaches the comparison and fails there.
    """
    best_gmin, best_model = -1.0, None
    for pseed in range(1, tries + 1):
        model = build_model()
        perturb = np.random.default_rng(pseed)
        for p in model.parameters():
            p.data += perturb.normal(0.0, 0.2, p.data.shape)
            p.grad = np.zeros_like(p.data)
        loss_of(model).backward()
        gmin = min(np.abs(p.grad).min() for p in model.parameters())
        if gmin >= _GRADCHECK_MIN_ENTRY:
            return model
        if gmin > best_gmin:
            best_gmin, best_model = gmin, model
    return best_model


def toy_gradcheck(eps: float = 1e-5, seed: int = 0) -> dict:
    """Full-episode finite-difference check at toy dimensions.

    Builds a small dataset and model, samples one episode, and compares
    analytic gradients of the total loss against central differences for
    every learnable parameter. The check runs at a generic parameter point
    (a seeded perturbation of the fresh init): at the raw init the
    attention weights sit at a near-degenerate point where some gradient
    entries are orders of magnitude below the loss's double-precision
    noise floor, which says nothing about gradient correctness. Returns a
    report dict.
    """
    cfg = SynthConfig(n_domains=2, n_classes=3, num_patches=4, patch_width=6,
                      dim=8, samples_per_class=8, n_target_domains=1,
                      n_templates=3, seed=seed)
    dataset = generate(cfg)
    mcfg = ModelConfig(dim=8, num_patches=4, patch_width=6, num_classes=3,
                       cpnet_depth=1, frozen_depth=1, cache_size=2,
                       init_seed=seed)
    prototypes = greedy_ensemble(dataset.bundle)
    rng = np.random.default_rng(seed)
    episode = sample_episode(dataset, rng, batch_support=2, batch_query=3)
    support = dataset.grids[episode.support_indices]
    query = dataset.grids[episode.query_indices]
    labels = dataset.class_ids[episode.query_indices]

    def episode_loss(model):
        loss, _ = model.episode_loss(support, query, labels, lam=0.1)
        return loss

    model = _generic_point(lambda: Model(mcfg, prototypes.matrix), episode_loss)

    def loss_fn():
        return episode_loss(model)

    params = model.parameters()
    worst = grad_check(loss_fn, params, eps=eps)
    return {
        "eps": eps,
        "seed": seed,
        "num_parameters": int(sum(p.data.size for p in params)),
        "max_rel_err": float(worst),
        "threshold": GRADCHECK_THRESHOLD,
        "passed": bool(worst < GRADCHECK_THRESHOLD),
    }


def cmd_gradcheck(args) -> int:
    seed = _resolve_seed(args.seed, {}, 0)
    report = toy_gradcheck(eps=args.eps, seed=seed)
    if args.out is not None:
        echo = {"command": "gradcheck", "eps": args.eps, "seed": seed}
        _publish(args.out, echo,
                 lambda stage: (stage.mkdir(parents=True, exist_ok=True),
                                write_json(stage / "report.json", report))[0])
    status = "pass" if report["passed"] else "FAIL"
    print(f"gradcheck {status}: max rel err {report['max_rel_err']:.3e} "
          f"over {report['num_parameters']} parameters (eps {report['eps']:g})")
    return 0 if report["passed"] else 3


# ---------------------------------------------------------------------------
# parser


def _build_parser() -> _Parser:
    parser = _Parser(prog="l2c", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ensemble", help="greedy template selection")
    p.add_argument("--bundle", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--criterion", default="uniformity",
                   choices=("uniformity", "atfd"))
    p.add_argument("--t", type=float, default=2.0)
    p.set_defaults(fn=cmd_ensemble)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--domains", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--domain-shift", type=float, dest="domain_shift")
    p.add_argument("--noise", type=float)
    p.add_argument("--samples-per-class", type=int, dest="samples_per_class")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="episodic training")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--init-seed", type=int, dest="init_seed")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lam", type=float)
    p.add_argument("--criterion", choices=("uniformity", "atfd"))
    p.add_argument("--sampling", choices=("domain-centric", "erm"))
    p.add_argument("--ensemble", choices=("greedy", "average"))
    p.add_argument("--max-steps", type=int, dest="max_steps")
    p.add_argument("--no-daf", action="store_true")
    p.add_argument("--no-revert-attention", action="store_true")
    p.add_argument("--no-refinement", action="store_true")
    p.add_argument("--no-uniformity", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("adapt", help="compute a target-domain prompt")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--domain", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--support", type=int, default=DEFAULT_SUPPORT_SIZE)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_adapt)

    p = sub.add_parser("eval", help="evaluate on target domains")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--domain", type=int)
    p.add_argument("--prompt")
    p.add_argument("--support", type=int, default=DEFAULT_SUPPORT_SIZE)
    p.add_argument("--seed", type=int)
    p.add_argument("--metrics", default="accuracy,macro_f1")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except NonFiniteError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except L2CError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
