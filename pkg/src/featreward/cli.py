"""``featreward`` command line.

Exit codes: 0 success, 1 usage error, 2 data/validation error,
3 numerical failure, 4 remote-scorer failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__, baselines, eval_harness, influence, policy_opt, reward_net, scorer, synth_oracle
from .core_types import (
    CandidateRef,
    DataError,
    FeatureSchema,
    NumericalError,
    PreferencePair,
    checked_features,
    dump_jsonl,
    load_candidate_pools,
    load_preference_dataset,
    pool_from_dict,
)

log = logging.getLogger("featreward")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC, EXIT_REMOTE = 0, 1, 2, 3, 4
DEFAULT_LATENT_WEIGHTS = (1.0, 0.8, 0.4, 0.2, 0.4, 1.0, 0.2)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- helpers -----------------------------------------------------------------


def _digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def _require_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"file not found: {path}")
    return p


def _ints(text) -> tuple[int, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(int(t) for t in text)
    return tuple(int(t) for t in str(text).split(",") if t.strip()) if text not in (None, "") else ()


def _floats(text) -> tuple[float, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(float(t) for t in text)
    return tuple(float(t) for t in str(text).split(","))


def write_manifest(out_path, command: str, cfg: dict, inputs: Sequence, outputs: Sequence, started: float) -> Path:
    manifest = {
        "command": command,
        "config": cfg,
        "inputs": {str(p): _digest(p) for p in inputs},
        "seeds": {k: v for k, v in cfg.items() if "seed" in k},
        "tool_version": __version__,
        "started_at": started,
        "wall_seconds": time.time() - started,
        "outputs": [str(p) for p in outputs],
    }
    path = Path(f"{out_path}.manifest.json")
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _schema(cfg) -> FeatureSchema:
    return FeatureSchema.load(cfg["schema"]) if cfg.get("schema") else FeatureSchema.default()


# -- commands ----------------------------------------------------------------
# Each entry: defaults for the effective config and the handler.


def cmd_synth_gen(cfg):
    schema = _schema(cfg)
    if cfg["latent"] == "linear":
        spec = synth_oracle.LatentRewardSpec.linear(_floats(cfg["weights"]), cfg["temperature"])
    else:
        spec = synth_oracle.LatentRewardSpec.random_mlp(_ints(cfg["hidden"]), cfg["latent_seed"], cfg["temperature"])
    outputs = []
    if not cfg.get("out") and not cfg.get("pools_out"):
        raise UsageError("synth-gen: need --out and/or --pools-out")
    if cfg.get("out"):
        pairs = synth_oracle.sample_preferences(spec, cfg["pairs"], cfg["seed"], schema)
        dump_jsonl(pairs, cfg["out"])
        outputs.append(cfg["out"])
        print(f"wrote {len(pairs)} pairs to {cfg['out']}")
    if cfg.get("pools_out"):
        pools = synth_oracle.gen_candidate_pools(spec, cfg["pools"], cfg["per_tier"], cfg["seed"] + 1, schema)
        dump_jsonl(pools, cfg["pools_out"])
        outputs.append(cfg["pools_out"])
        print(f"wrote {len(pools)} pools to {cfg['pools_out']}")
    main_out = outputs[0]
    spec.save(f"{main_out}.latent.json")
    outputs.append(f"{main_out}.latent.json")
    return main_out, [], outputs


def _read_raw_pools(path):
    _require_file(path)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    yield lineno, json.loads(line)
                except json.JSONDecodeError as e:
                    raise DataError(f"parse failure: {e.msg}", lineno, str(path)) from None


def _context_text(rec) -> str:
    ctx = rec.get("context", rec.get("reviews", ""))
    return "\n".join(ctx) if isinstance(ctx, list) else str(ctx)


def _scorer_from(cfg, schema) -> scorer.Scorer:
    threads = cfg.get("threads") or 1
    if cfg["backend"] == scorer.REMOTE:
        templates = (
            scorer.load_templates(cfg["templates"], schema.names)
            if cfg.get("templates")
            else {n: scorer.default_template() for n in schema.names}
        )
        sc = scorer.ScorerConfig(
            backend=scorer.REMOTE,
            remote_endpoint=cfg.get("endpoint"),
            prompt_templates=templates,
            cache_path=cfg.get("cache"),
            max_parallel_requests=max(cfg.get("parallel") or 1, threads),
            retry_limit=cfg["retries"],
        )
    else:
        sc = scorer.ScorerConfig(cache_path=cfg.get("cache"))
    return scorer.Scorer(sc, schema)


def cmd_score(cfg):
    schema = _schema(cfg)
    sc = _scorer_from(cfg, schema)
    raw = list(_read_raw_pools(cfg["input"]))
    items = []
    for lineno, rec in raw:
        ctx = _context_text(rec)
        for c in rec.get("candidates", []):
            if not c.get("text"):
                raise DataError(f"candidate {c.get('candidate_id')!r} has no text to score", lineno, cfg["input"])
            items.append((ctx, c["text"]))
    vectors = iter(sc.score_batch(items))
    pools = []
    for lineno, rec in raw:
        rec = dict(rec)
        rec["context"] = _context_text(rec)
        rec.pop("reviews", None)
        rec["candidates"] = [dict(c, features=list(next(vectors).values)) for c in rec.get("candidates", [])]
        try:
            pools.append(pool_from_dict(rec, schema))
        except DataError as e:
            raise DataError(e.reason, lineno, cfg["input"]) from None
    dump_jsonl(pools, cfg["out"])
    print(f"scored {len(items)} candidates in {len(pools)} pools -> {cfg['out']}")
    return cfg["out"], [cfg["input"]], [cfg["out"]]


def _train_config(cfg) -> reward_net.TrainConfig:
    return reward_net.TrainConfig(
        batch_size=cfg["batch_size"],
        learning_rate=cfg["lr"],
        weight_decay=cfg["weight_decay"],
        warmup_fraction=cfg["warmup"],
        total_epochs=cfg["epochs"],
        seed=cfg["seed"],
        holdout_fraction=cfg["holdout"],
        hidden=_ints(cfg["hidden"]),
        activation=cfg["activation"],
    )


def cmd_train_reward(cfg):
    schema = _schema(cfg)
    _require_file(cfg["data"])
    data = load_preference_dataset(cfg["data"], schema)
    tc = _train_config(cfg)
    report = reward_net.train_reward(data, tc, schema=schema)
    reward_net.save_checkpoint(report.params, cfg["out"], tc)
    report_path = cfg.get("report") or f"{cfg['out']}.report.csv"
    report.write_csv(report_path)
    last = report.epochs[-1]
    msg = f"trained on {report.n_train} pairs; final train loss {last.train_loss:.4f}"
    if last.holdout_acc is not None:
        msg += f"; holdout loss {last.holdout_loss:.4f}, holdout accuracy {last.holdout_acc:.4f}"
    print(msg)
    return cfg["out"], [cfg["data"]], [cfg["out"], report_path]


def cmd_eval_reward(cfg):
    schema = _schema(cfg)
    params, _ = reward_net.load_checkpoint(_require_file(cfg["model"]))
    data = load_preference_dataset(_require_file(cfg["data"]), params.schema or schema)
    result = {
        "pairs": len(data),
        "elo_loss": reward_net.elo_loss(params, data),
        "preference_accuracy": reward_net.preference_accuracy(params, data),
    }
    print(json.dumps(result, indent=1))
    if cfg.get("out"):
        Path(cfg["out"]).write_text(json.dumps(result, indent=1) + "\n", encoding="utf-8")
        return cfg["out"], [cfg["model"], cfg["data"]], [cfg["out"]]
    return None


def cmd_analyze_influence(cfg):
    params, _ = reward_net.load_checkpoint(_require_file(cfg["model"]))
    schema = params.schema or _schema(cfg)
    ic = influence.InfluenceConfig(
        delta=cfg["delta"],
        sample_count=cfg["samples"],
        sampling="grid" if cfg.get("grid") else "monte_carlo",
        points_per_axis=cfg.get("grid") or 5,
        seed=cfg["seed"],
    )
    rep = influence.feature_influence(params, schema, ic, threads=cfg.get("threads") or 1)
    print(rep.bar_chart())
    if cfg.get("out"):
        rep.write_csv(cfg["out"])
        return cfg["out"], [cfg["model"]], [cfg["out"]]
    return None


def cmd_derive_implicit(cfg):
    schema = _schema(cfg)
    pools = load_candidate_pools(_require_file(cfg["pools"]), schema)
    pol = baselines.ImplicitPairPolicy(cfg["pairing"], cfg.get("max_pairs"), cfg["seed"])
    pairs = baselines.derive_implicit_pairs(pools, pol)
    dump_jsonl(pairs, cfg["out"])
    print(f"derived {len(pairs)} implicit pairs from {len(pools)} pools -> {cfg['out']}")
    return cfg["out"], [cfg["pools"]], [cfg["out"]]


def _load_reward(cfg):
    if cfg.get("reward") == "naive-mean":
        return lambda x: np.mean(np.asarray(x, dtype=float), axis=1)
    params, _ = reward_net.load_checkpoint(_require_file(cfg["reward"]))
    return params


def cmd_train_policy(cfg):
    schema = _schema(cfg)
    if cfg.get("beta") is None:
        raise UsageError("train-policy: --beta is required")
    pools = load_candidate_pools(_require_file(cfg["pools"]), schema)
    reward = _load_reward(cfg)
    pc = policy_opt.PolicyOptConfig(
        beta=cfg["beta"],
        learning_rate=cfg["lr"],
        epochs=cfg["epochs"],
        seed=cfg["seed"],
        objective_variant=cfg["variant"],
        epsilon=cfg["epsilon"],
        inner_steps=cfg["inner_steps"],
        hidden=_ints(cfg["hidden"]),
        activation=cfg["activation"],
    )
    policy, report = policy_opt.train_policy(pools, reward, pc, schema=schema)
    policy_opt.save_checkpoint(policy, cfg["out"], pc)
    report_path = cfg.get("report") or f"{cfg['out']}.report.csv"
    report.write_csv(report_path)
    last = report.epochs[-1]
    print(f"policy objective {last.objective:.4f}; mean reward {last.mean_reward:.4f}; mean KL {last.mean_kl:.4f}")
    inputs = [cfg["pools"]] + ([cfg["reward"]] if cfg["reward"] != "naive-mean" else [])
    return cfg["out"], inputs, [cfg["out"], report_path]


def cmd_eval_policy(cfg):
    schema = _schema(cfg)
    policy, meta = policy_opt.load_checkpoint(_require_file(cfg["policy"]))
    pools = load_candidate_pools(_require_file(cfg["pools"]), schema)
    reward = _load_reward(cfg)
    beta = cfg["beta"] if cfg.get("beta") is not None else meta.get("beta", 0.0)
    result = {
        "pools": len(pools),
        "beta": beta,
        "objective": policy_opt.policy_objective(policy, pools, reward, beta),
        "mean_kl": policy_opt.mean_kl(policy, pools),
        "mean_argmax_probability": float(np.mean(policy_opt.argmax_probability(policy, pools, reward))),
    }
    print(json.dumps(result, indent=1))
    if cfg.get("out"):
        Path(cfg["out"]).write_text(json.dumps(result, indent=1) + "\n", encoding="utf-8")
        return cfg["out"], [cfg["policy"], cfg["pools"]], [cfg["out"]]
    return None


def cmd_wtl(cfg):
    records = eval_harness.load_rankings(_require_file(cfg["rankings"]))
    m = eval_harness.pairwise_wtl(records)
    print(m.text_table())
    if cfg.get("out"):
        m.write_csv(cfg["out"])
        return cfg["out"], [cfg["rankings"]], [cfg["out"]]
    return None


def _read_count_table(path) -> list[list[float]]:
    text = _require_file(path).read_text(encoding="utf-8").strip()
    if text.startswith("["):
        return json.loads(text)
    rows = []
    for line in text.splitlines():
        cells = [c.strip() for c in line.split(",")]
        try:
            rows.append([float(c) for c in cells])
        except ValueError:
            if rows:
                raise DataError(f"non-numeric row: {line!r}", path=str(path)) from None
            # header line
    return rows


def cmd_kappa(cfg):
    k = eval_harness.fleiss_kappa(_read_count_table(cfg["table"]))
    print(f"fleiss_kappa {k:.6f}")
    return None


def cmd_feature_gap(cfg):
    schema = _schema(cfg)
    data = load_preference_dataset(_require_file(cfg["data"]), schema)
    rep = eval_harness.feature_gap_report(data, schema)
    print(rep.text_table())
    if cfg.get("out"):
        rep.write_csv(cfg["out"])
        return cfg["out"], [cfg["data"]], [cfg["out"]]
    return None


# -- annotation ----------------------------------------------------------------


def _already_annotated(path) -> set[str]:
    p = Path(path)
    if not p.exists():
        return set()
    done = set()
    with open(p, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                done.add(str(json.loads(line)["context_id"]))
    return done


def _item_rng(seed: int, context_id: str) -> np.random.Generator:
    h = int.from_bytes(hashlib.sha256(context_id.encode("utf-8")).digest()[:8], "little")
    return np.random.default_rng([seed, h])


def annotate(source, out, annotator: str, seed: int = 0, answers=None, schema: FeatureSchema | None = None,
             stdin=None, stdout=None) -> dict:
    """Present A/B pairs, append chosen preferences to ``out``.

    ``answers`` is an iterable of scripted replies; without it stdin must be
    a terminal. Returns counts of presented/recorded/skipped items.
    """
    schema = schema or FeatureSchema.default()
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    if answers is None and not stdin.isatty():
        raise UsageError("annotate: stdin is not interactive; pass --batch-answers")
    answer_iter = iter(answers) if answers is not None else None
    done = _already_annotated(out)
    rule = scorer.Scorer(scorer.ScorerConfig(), schema)
    stats = {"presented": 0, "recorded": 0, "skipped": 0}
    for lineno, rec in _read_raw_pools(source):
        ctx_id = str(rec.get("context_id", ""))
        if not ctx_id:
            raise DataError("missing context_id", lineno, str(source))
        if ctx_id in done:
            continue
        cands = rec.get("candidates", [])
        if len(cands) != 2:
            raise DataError("annotation items need exactly two candidates", lineno, str(source))
        ctx = _context_text(rec)
        order = [0, 1] if _item_rng(seed, ctx_id).random() < 0.5 else [1, 0]
        shown = [cands[i] for i in order]
        stats["presented"] += 1
        stdout.write(f"\n=== {ctx_id} ===\n{ctx}\n\n[A] {shown[0].get('text', '')}\n\n[B] {shown[1].get('text', '')}\n")
        stdout.write("Prefer A or B (skip, quit)? ")
        stdout.flush()
        if answer_iter is not None:
            reply = next(answer_iter, None)
        else:
            reply = stdin.readline() or None
        if reply is None:
            break
        reply = reply.strip().lower()
        if reply in ("q", "quit"):
            break
        if reply not in ("a", "b"):
            stats["skipped"] += 1
            log.info("skipped %s", ctx_id)
            continue
        win, lose = (shown[0], shown[1]) if reply == "a" else (shown[1], shown[0])

        def feats(c):
            if "features" in c:
                return checked_features(c["features"], schema, f"candidate {c.get('candidate_id')!r} features")
            return rule.score(ctx, c["text"])

        pair = PreferencePair(
            ctx_id,
            CandidateRef(str(win["candidate_id"]), win.get("text")),
            CandidateRef(str(lose["candidate_id"]), lose.get("text")),
            feats(win),
            feats(lose),
            annotator,
        )
        with open(out, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(pair.to_dict()) + "\n")
        stats["recorded"] += 1
    return stats


def cmd_annotate(cfg):
    answers = None
    if cfg.get("batch_answers"):
        answers = _require_file(cfg["batch_answers"]).read_text(encoding="utf-8").splitlines()
    stats = annotate(cfg["source"], cfg["out"], cfg["annotator"], cfg["seed"], answers, _schema(cfg))
    print(f"presented {stats['presented']}, recorded {stats['recorded']}, skipped {stats['skipped']}", file=sys.stderr)
    return cfg["out"], [cfg["source"]], [cfg["out"]]


# -- parser --------------------------------------------------------------------

COMMON = {"seed": 0, "schema": None, "threads": 1}

COMMANDS = {
    "synth-gen": (
        cmd_synth_gen,
        "generate synthetic preference pairs and/or tiered candidate pools",
        {"pairs": 940, "temperature": 0.0, "out": None, "pools": 0, "per_tier": 3, "pools_out": None,
         "latent": "linear", "weights": ",".join(map(str, DEFAULT_LATENT_WEIGHTS)), "hidden": "16", "latent_seed": 0},
    ),
    "score": (
        cmd_score,
        "compute feature vectors for a pool file of texts",
        {"input": None, "out": None, "backend": scorer.RULE_BASED, "endpoint": None, "templates": None,
         "cache": None, "parallel": 4, "retries": 2},
    ),
    "train-reward": (
        cmd_train_reward,
        "train the feature-based reward model with the Elo loss",
        {"data": None, "out": "reward.ckpt", "report": None, "batch_size": 128, "lr": 0.005, "weight_decay": 0.05,
         "warmup": 0.1, "epochs": 60, "holdout": 0.1, "hidden": "16,16", "activation": "tanh"},
    ),
    "eval-reward": (cmd_eval_reward, "loss and preference accuracy of a reward checkpoint",
                    {"model": None, "data": None, "out": None}),
    "analyze-influence": (
        cmd_analyze_influence,
        "relative influence of each feature on a reward checkpoint",
        {"model": None, "delta": 0.1, "samples": 8192, "grid": None, "out": None},
    ),
    "derive-implicit": (
        cmd_derive_implicit,
        "derive GOOD > SBAD > VBAD preference pairs from tiered pools",
        {"pools": None, "out": None, "pairing": baselines.ALL_CROSS_TIER, "max_pairs": None},
    ),
    "train-policy": (
        cmd_train_policy,
        "KL-regularized policy optimization over an offline pool buffer",
        {"pools": None, "reward": None, "beta": None, "out": None, "report": None, "lr": 0.1, "epochs": 2000,
         "variant": policy_opt.EXACT, "epsilon": 0.2, "inner_steps": 4, "hidden": "16,16", "activation": "tanh"},
    ),
    "eval-policy": (cmd_eval_policy, "objective, KL and argmax mass of a policy checkpoint",
                    {"policy": None, "pools": None, "reward": None, "beta": None, "out": None}),
    "wtl": (cmd_wtl, "pairwise win/tie/loss fractions from rankings", {"rankings": None, "out": None}),
    "kappa": (cmd_kappa, "Fleiss' kappa of an items x categories count table", {"table": None}),
    "feature-gap": (cmd_feature_gap, "mean features of preferred vs dispreferred candidates",
                    {"data": None, "out": None}),
    "annotate": (
        cmd_annotate,
        "interactive A/B preference annotation",
        {"source": None, "out": None, "annotator": "anon", "batch_answers": None},
    ),
}

REQUIRED = {
    "score": ("input", "out"),
    "train-reward": ("data", "out"),
    "eval-reward": ("model", "data"),
    "analyze-influence": ("model",),
    "derive-implicit": ("pools", "out"),
    "train-policy": ("pools", "reward", "beta", "out"),
    "eval-policy": ("policy", "pools", "reward"),
    "wtl": ("rankings",),
    "kappa": ("table",),
    "feature-gap": ("data",),
    "annotate": ("source", "out"),
}

TYPES = {
    "pairs": int, "temperature": float, "per_tier": int, "latent_seed": int, "parallel": int,
    "retries": int, "batch_size": int, "lr": float, "weight_decay": float, "warmup": float, "epochs": int,
    "holdout": float, "delta": float, "samples": int, "grid": int, "max_pairs": int, "beta": float,
    "epsilon": float, "inner_steps": int, "seed": int, "threads": int,
}

CHOICES = {
    "latent": ("linear", "mlp"),
    "backend": (scorer.RULE_BASED, scorer.REMOTE),
    "activation": ("tanh", "relu"),
    "pairing": (baselines.ALL_CROSS_TIER, baselines.ADJACENT_TIER_ONLY),
    "variant": (policy_opt.EXACT, policy_opt.CLIPPED),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="featreward", description="Feature-based reward modeling and limited-trajectory RLHF.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name, (_, help_text, defaults) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_text, description=help_text)
        for key, default in {**COMMON, **defaults}.items():
            flag = "--" + key.replace("_", "-")
            # "pools" is a count for synth-gen and a path elsewhere
            typ = int if (name == "synth-gen" and key == "pools") else TYPES.get(key, str)
            kw = {"type": typ, "default": None, "help": f"(default: {default})"}
            if key in CHOICES:
                kw["choices"] = CHOICES[key]
            sp.add_argument(flag, **kw)
        sp.add_argument("--config", default=None, help="JSON config file; flags override it")
        sp.add_argument("--print-config", action="store_true", help="print the effective configuration and exit")
        sp.add_argument("-v", "--verbose", action="store_true")
    return parser


def effective_config(name: str, args: argparse.Namespace) -> dict:
    """Defaults, overridden by the config file, overridden by flags."""
    defaults = {**COMMON, **COMMANDS[name][2]}
    cfg = dict(defaults)
    if args.config:
        with open(_require_file(args.config), encoding="utf-8") as fh:
            file_cfg = json.load(fh)
        section = file_cfg.get(name, file_cfg) if isinstance(file_cfg, dict) else {}
        for k, v in section.items():
            key = k.replace("-", "_")
            if key in defaults:
                cfg[key] = v
    for k in defaults:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    return cfg


def run(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        if not args.command:
            raise UsageError("featreward: missing subcommand (see --help)")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        cfg = effective_config(args.command, args)
        if args.print_config:
            print(json.dumps(cfg, indent=1, sort_keys=True))
            return EXIT_OK
        missing = [k for k in REQUIRED.get(args.command, ()) if cfg.get(k) is None]
        if missing:
            raise UsageError(f"{args.command}: missing required option(s): "
                             + ", ".join("--" + k.replace("_", "-") for k in missing))
        started = time.time()
        handler = COMMANDS[args.command][0]
        result = handler(cfg)
        if result:
            out, inputs, outputs = result
            write_manifest(out, args.command, cfg, inputs, outputs, started)
        return EXIT_OK
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as e:
        msg = str(e) if str(e).startswith("file not found") else f"file not found: {e.filename}"
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as e:
        print(f"error: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except scorer.ScorerError as e:
        print(f"error: remote scorer: {e}", file=sys.stderr)
        return EXIT_REMOTE
    except (DataError, ValueError, KeyError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())
