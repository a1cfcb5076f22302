"""Operator surface.

Subcommands: gen-data | train | reflow | sample | eval-js | sweep |
order-exp. Every command is driven by a JSON config (strict schema,
unknown keys rejected) and is a pure function of (config, input files,
seed) at the byte level; wall-clock timestamps go to a sidecar run.log
only. Failures exit nonzero with one machine-parseable line:
``error: <category>: <message>``.
"""

from __future__ import annotations

import argparse
import datetime
import json
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import evalsuite as ev
from . import report
from .cascade import (
    Cascade,
    CascadeError,
    VARIABLES,
    build_cascade,
    cascade_infer,
    cascade_reflow,
    train_cascade,
)
from .config import ConfigError, RunConfig, load_config
from .generative import GenerativeError, SamplerConfig
from .synthdata import Corpus, CorpusError, generate_corpus, load_corpus, save_corpus

SAMPLES_FORMAT = "prosody-samples-v1"


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


def _log(out_dir: Path, message: str) -> None:
    # timestamps are confined to this sidecar; artifacts stay byte-stable
    stamp = datetime.datetime.now(datetime.timezone.utc).isoformat()
    with open(out_dir / "run.log", "a", encoding="utf-8") as f:
        f.write(f"{stamp} {message}\n")


def _prepare_out(config: RunConfig, override: str | None) -> Path:
    out = Path(override or config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _resolve_corpus(config: RunConfig, path_override: str | None) -> Corpus:
    path = path_override or config.corpus.path
    if path is not None:
        try:
            return load_corpus(path)
        except FileNotFoundError:
            raise CliError("missing-file", f"corpus file not found: {path}")
        except CorpusError as exc:
            category = "hash-mismatch" if "hash" in str(exc) else "format-error"
            raise CliError(category, str(exc))
    return generate_corpus(config.corpus.spec())


def _load_cascade_checkpoint(path: str) -> Cascade:
    try:
        return ckpt.load_cascade(path)
    except FileNotFoundError:
        raise CliError("missing-file", f"checkpoint not found: {path}")
    except ckpt.CheckpointError as exc:
        category = "hash-mismatch" if "hash" in str(exc) else "format-error"
        raise CliError(category, str(exc))


def _check_corpus_binding(cascade: Cascade, corpus: Corpus) -> None:
    bound = cascade.metadata.get("corpus_hash")
    actual = corpus.content_hash()
    if bound is not None and bound != actual:
        raise CliError(
            "hash-mismatch",
            f"checkpoint was trained on corpus {bound[:12]}..., "
            f"given corpus is {actual[:12]}...",
        )


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_data(config: RunConfig, args) -> int:
    out = _prepare_out(config, args.out)
    corpus = generate_corpus(config.corpus.spec())
    path = out / "corpus.jsonl"
    save_corpus(corpus, path)
    _log(out, f"gen-data wrote {path} ({len(corpus.records)} utterances, "
              f"hash {corpus.content_hash()[:12]})")
    print(path)
    return 0


def cmd_train(config: RunConfig, args) -> int:
    out = _prepare_out(config, args.out)
    corpus = _resolve_corpus(config, args.corpus)
    seed = args.seed if args.seed is not None else config.training.seed
    if config.cascade.mode == "cascade":
        cascade = build_cascade(
            config.model.kind, condition_dim=corpus.spec.condition_dim,
            order=tuple(config.cascade.order), seed=seed,
            noise_dim=config.model.noise_dim, hidden=config.model.hidden,
            n_layers=config.model.n_layers, kernel=config.model.kernel,
            sigma_min=config.model.sigma_min,
            solver_steps=config.model.solver_steps,
        )
    else:
        # joint mode scales its own noise_dim/hidden to hold parameters even
        cascade = build_cascade(
            config.model.kind, condition_dim=corpus.spec.condition_dim,
            mode="joint", seed=seed, sigma_min=config.model.sigma_min,
            solver_steps=config.model.solver_steps,
        )
    train_cascade(cascade, corpus.records, steps=config.training.steps,
                  batch_size=config.training.batch_size, lr=config.training.lr,
                  seed=seed, nf_dequant_sigma=config.training.nf_dequant_sigma)
    cascade.metadata.update({
        "corpus_hash": corpus.content_hash(),
        "config_hash": config.config_hash(),
    })
    name = "cascade" if config.cascade.mode == "cascade" else "joint"
    path = out / f"{name}_{config.model.kind.lower()}.ckpt"
    ckpt.save_cascade(path, cascade)
    _log(out, f"train wrote {path}")
    print(path)
    return 0


def cmd_reflow(config: RunConfig, args) -> int:
    out = _prepare_out(config, args.out)
    teacher = _load_cascade_checkpoint(args.teacher)
    expected = config.reflow.expected_teacher_hash
    if expected is not None:
        actual = ckpt.cascade_param_hash(teacher)
        if actual != expected:
            raise CliError(
                "hash-mismatch",
                f"teacher checkpoint hash mismatch: config expects {expected}, "
                f"checkpoint is {actual}",
            )
    corpus = _resolve_corpus(config, args.corpus)
    _check_corpus_binding(teacher, corpus)
    seed = args.seed if args.seed is not None else config.training.seed
    try:
        student = cascade_reflow(
            teacher, corpus.records, np.random.default_rng(seed),
            extra_steps=config.reflow.extra_steps,
            batch_size=config.training.batch_size, lr=config.training.lr,
            ode_steps_teacher=config.reflow.ode_steps_teacher,
        )
    except (CascadeError, GenerativeError) as exc:
        raise CliError("data-error", str(exc))
    student.metadata.update({
        "corpus_hash": corpus.content_hash(),
        "config_hash": config.config_hash(),
        "teacher_checkpoint": str(args.teacher),
    })
    path = out / "cascade_rf.ckpt"
    ckpt.save_cascade(path, student)
    _log(out, f"reflow wrote {path}")
    print(path)
    return 0


def cmd_sample(config: RunConfig, args) -> int:
    out = _prepare_out(config, args.out)
    cascade = _load_cascade_checkpoint(args.ckpt)
    corpus = _resolve_corpus(config, args.corpus)
    _check_corpus_binding(cascade, corpus)
    tau = args.tau if args.tau is not None else config.sampler.temperature
    n = args.n if args.n is not None else config.eval.n_draws
    seed = args.seed if args.seed is not None else config.sampler.seed
    path = out / f"samples_tau{tau:g}.jsonl"
    header = {
        "format": SAMPLES_FORMAT,
        "config_hash": config.config_hash(),
        "checkpoint_hash": ckpt.cascade_param_hash(cascade),
        "corpus_hash": corpus.content_hash(),
        "tau": tau,
        "n_draws": n,
        "n_records": len(corpus.records),
        "seed": seed,
    }
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for u, rec in enumerate(corpus.records):
            child = int(np.random.SeedSequence([seed, u]).generate_state(1)[0])
            contours = cascade_infer(
                cascade, rec.features,
                SamplerConfig(temperature=tau,
                              solver_steps=config.sampler.solver_steps,
                              seed=child),
                n_draws=n,
            )
            for j, c in enumerate(contours):
                f.write(json.dumps({"utterance_id": rec.utterance_id, "draw": j,
                                    **c.to_json()}, sort_keys=True) + "\n")
    _log(out, f"sample wrote {path}")
    print(path)
    return 0


def _load_samples(path) -> tuple[dict, dict[str, list]]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = f.read().splitlines()
    except FileNotFoundError:
        raise CliError("missing-file", f"samples file not found: {path}")
    if not lines:
        raise CliError("format-error", f"{path}: empty samples file")
    header = json.loads(lines[0])
    if header.get("format") != SAMPLES_FORMAT:
        raise CliError(
            "format-error",
            f"{path}: format {header.get('format')!r} != expected {SAMPLES_FORMAT!r}",
        )
    by_utterance: dict[str, list] = {}
    from .cascade import ContourSet
    for line in lines[1:]:
        obj = json.loads(line)
        by_utterance.setdefault(obj["utterance_id"], []).append(
            ContourSet.from_json(obj)
        )
    return header, by_utterance


def _pool_samples(corpus: Corpus, by_utterance: dict, variable: str):
    per_record = []
    for rec in corpus.records:
        per_record.append(by_utterance.get(rec.utterance_id, []))
    return ev.pool_by_class(corpus, per_record, variable)


def cmd_eval_js(config: RunConfig, args) -> int:
    out = _prepare_out(config, args.out)
    corpus = _resolve_corpus(config, args.corpus)
    _, pool_a_src = _load_samples(args.samples_a)
    against_analytic = args.samples_b is None
    if not against_analytic:
        _, pool_b_src = _load_samples(args.samples_b)

    def robust_kde(values):
        if len(values) > 1 and values.std(ddof=1) > 0:
            return ev.kde(values)
        return ev.kde(values, bandwidth=0.1)

    rows_mean, rows_class = [], []
    overlay_paths = []
    for variable in VARIABLES:
        pool_a = _pool_samples(corpus, pool_a_src, variable)
        if against_analytic:
            pool_b = None
        else:
            pool_b = _pool_samples(corpus, pool_b_src, variable)
        per_class = []
        for c in sorted(pool_a):
            vals_a = pool_a[c]
            if len(vals_a) < config.eval.min_samples:
                continue
            p = robust_kde(vals_a)
            if against_analytic:
                from .synthdata import analytic_pdf
                mix = analytic_pdf(corpus.spec, c, variable)
                q = ev.density_from_function(mix.pdf, *mix.span())
            else:
                vals_b = pool_b.get(c, np.array([]))
                if len(vals_b) < config.eval.min_samples:
                    continue
                q = robust_kde(vals_b)
            js = ev.js_divergence(p, q)
            per_class.append((c, js))
            rows_class.append([variable, c, js.value_nats, js.value_bits,
                               len(vals_a)])
        if not per_class:
            raise CliError("data-error",
                           f"no token class has >= {config.eval.min_samples} "
                           f"samples for {variable!r}")
        nats = float(np.mean([js.value_nats for _, js in per_class]))
        rows_mean.append([variable, nats, nats / ev.LN2, len(per_class)])

        all_a = np.concatenate([pool_a[c] for c in sorted(pool_a)])
        overlays = {"samples_a": robust_kde(all_a)}
        if not against_analytic:
            all_b = np.concatenate([pool_b[c] for c in sorted(pool_b)])
            overlays["samples_b"] = robust_kde(all_b)
        fig_path = out / f"eval_js_{variable}.svg"
        report.plot_density_overlay(overlays, f"{variable}: pooled densities",
                                    fig_path)
        overlay_paths.append(fig_path)

    provenance = {"config_hash": config.config_hash(),
                  "reference": "analytic" if against_analytic else "samples_b",
                  "corpus_hash": corpus.content_hash()}
    mean_path = out / "eval_js.csv"
    report.write_csv(mean_path, ["variable", "js_nats", "js_bits", "n_classes"],
                     rows_mean, provenance)
    report.write_csv(out / "eval_js_per_class.csv",
                     ["variable", "token_class", "js_nats", "js_bits", "n_samples"],
                     rows_class, provenance)
    _log(out, f"eval-js wrote {mean_path}")
    print(mean_path)
    return 0


def cmd_sweep(config: RunConfig, args) -> int:
    out = _prepare_out(config, args.out)
    cascade = _load_cascade_checkpoint(args.ckpt)
    corpus = _resolve_corpus(config, args.corpus)
    _check_corpus_binding(cascade, corpus)
    seed = args.seed if args.seed is not None else config.sampler.seed
    records = corpus.records[: config.sampler.sweep_utterances]
    table = ev.temp_sweep(cascade, records, config.sampler.tau_grid,
                          n_draws=config.sampler.n_draws, seed=seed,
                          solver_steps=config.sampler.solver_steps)
    provenance = {"config_hash": config.config_hash(),
                  "checkpoint_hash": ckpt.cascade_param_hash(cascade),
                  "corpus_hash": corpus.content_hash()}
    csv_path = out / "sweep.csv"
    report.write_csv(csv_path, table.header(), table.rows(), provenance)
    fig_paths = report.plot_sweep(table, out)
    _log(out, f"sweep wrote {csv_path} and {len(fig_paths)} figures")
    print(csv_path)
    return 0


def cmd_order_exp(config: RunConfig, args) -> int:
    out = _prepare_out(config, args.out)
    corpus = _resolve_corpus(config, args.corpus)
    seed = args.seed if args.seed is not None else config.training.seed
    common = dict(
        noise_dim=config.model.noise_dim, hidden=config.model.hidden,
        n_layers=config.model.n_layers, kernel=config.model.kernel,
        sigma_min=config.model.sigma_min, solver_steps=config.model.solver_steps,
    )
    configurations = {
        "pitch_first": build_cascade(config.model.kind, corpus.spec.condition_dim,
                                     order=("pitch", "energy"), seed=seed, **common),
        "energy_first": build_cascade(config.model.kind, corpus.spec.condition_dim,
                                      order=("energy", "pitch"), seed=seed, **common),
        "joint": build_cascade(config.model.kind, corpus.spec.condition_dim,
                               mode="joint", seed=seed,
                               sigma_min=config.model.sigma_min,
                               solver_steps=config.model.solver_steps),
    }
    for name, cascade in configurations.items():
        train_cascade(cascade, corpus.records, steps=config.training.steps,
                      batch_size=config.training.batch_size,
                      lr=config.training.lr, seed=seed,
                      nf_dequant_sigma=config.training.nf_dequant_sigma)
        _log(out, f"order-exp trained {name}")
    hook = ev.recovery_eval_hook(
        n_draws=config.eval.n_draws, temperature=config.sampler.temperature,
        seed=config.eval.seed, reference=config.eval.reference,
        solver_steps=config.sampler.solver_steps,
        min_samples=config.eval.min_samples,
    )
    from .cascade import order_experiment
    result = order_experiment(corpus, configurations, hook)
    table = result.as_table()
    csv_path = out / "order_experiment.csv"
    report.write_csv(csv_path, table[0], table[1:],
                     {"config_hash": config.config_hash(),
                      "corpus_hash": corpus.content_hash()})
    _log(out, f"order-exp wrote {csv_path}")
    print(csv_path)
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="prosodyflow",
        description="Stochastic prosody regression: corpus generation, "
                    "training, rectification, sampling and evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, corpus=True):
        p.add_argument("--config", required=True, help="JSON run config")
        p.add_argument("--seed", type=int, default=None, help="seed override")
        p.add_argument("--threads", type=int, default=1,
                       help="reserved for per-utterance parallelism (default 1)")
        p.add_argument("--out", default=None, help="output directory override")
        if corpus:
            p.add_argument("--corpus", default=None,
                           help="corpus file (overrides config corpus.path)")

    p = sub.add_parser("gen-data", help="generate the synthetic corpus")
    common(p, corpus=False)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a predictor bundle")
    common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("reflow", help="rectify a trained CFM bundle")
    common(p)
    p.add_argument("--teacher", required=True, help="teacher checkpoint")
    p.set_defaults(fn=cmd_reflow)

    p = sub.add_parser("sample", help="draw contours from a checkpoint")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--n", type=int, default=None, help="draws per utterance")
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("eval-js", help="JS divergence between sample sets")
    common(p)
    p.add_argument("--samples-a", required=True)
    p.add_argument("--samples-b", default=None,
                   help="second sample set; omit to compare against the "
                        "analytic class laws")
    p.set_defaults(fn=cmd_eval_js)

    p = sub.add_parser("sweep", help="temperature sweep with figures")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("order-exp", help="pitch-first vs energy-first vs joint")
    common(p)
    p.set_defaults(fn=cmd_order_exp)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        try:
            config = load_config(args.config)
        except FileNotFoundError:
            raise CliError("missing-file", f"config file not found: {args.config}")
        except ConfigError as exc:
            raise CliError("config-invalid", str(exc))
        return args.fn(config, args)
    except CliError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return 1
    except (CorpusError, CascadeError, GenerativeError, ckpt.CheckpointError) as exc:
        print(f"error: data-error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
