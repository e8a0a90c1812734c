"""Command-line entry point: ``dress <command> [options]``.

Outputs go under ``--out`` (default ``$DRESS_OUTPUT_ROOT`` or ``./runs``), in
``seed-<seed>/`` for data and ``seed-<seed>/fold-<k>/`` for anything trained.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import env as sim
from . import nn
from .config import RunConfig, dumps_config, load_config
from .controller import Actor
from .data import Dataset, load_dataset, save_dataset
from .dynamics import DynamicModel, train_dynamic_model, write_curve_csv
from .errors import ConfigError, ContractError, DataError, NumericalError
from .evaluation import compare_folds, horizon_sweep, write_sweep_csv
from .experiment import build_env, fold_evaluation, fold_split, generate, true_returns
from .gradcheck import TOLERANCE, run_checks
from .pipeline import Variant, controller_imitation, run_dress_pipeline, session_table, stage_seed

OUTPUT_ENV = "DRESS_OUTPUT_ROOT"
EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 2, 3, 4

log = logging.getLogger("dress")


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n", encoding="utf-8")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")


class Workspace:
    """Paths and artifact loading for one (config, seed) pair."""

    def __init__(self, args, cfg: RunConfig):
        self.cfg = cfg
        self.seed = args.seed
        self.root = Path(args.out) / f"seed-{args.seed}"
        self.fold = getattr(args, "fold", 0)
        self.cfg_hash = nn.config_hash(cfg.to_dict())

    @property
    def fold_dir(self) -> Path:
        return self.root / f"fold-{self.fold}"

    def data(self) -> tuple[Dataset, list]:
        path = self.root / "data.jsonl"
        if not path.exists():
            raise DataError(f"{path} not found; run gen-data with --seed {self.seed} first")
        data = load_dataset(path, self.cfg.run.min_len, self.cfg.run.max_len)
        manifest = json.loads((self.root / "manifest.json").read_text())
        by_id = {e.user_id: e for e in data}
        folds = [[by_id[u] for u in users] for users in manifest["folds"]]
        return data, folds

    def split(self) -> tuple[Dataset, Dataset]:
        data, folds = self.data()
        return fold_split(data, folds, self.fold)

    def _check(self, path: Path) -> tuple[dict, dict]:
        if not path.exists():
            raise DataError(f"{path} not found")
        header, stores = nn.load_checkpoint(path)
        if header["config_hash"] != self.cfg_hash:
            raise ConfigError(
                f"{path} was trained under config hash {header['config_hash']}, but the current config hashes to "
                f"{self.cfg_hash}; pass the config the checkpoint was trained with (see config.toml next to it)")
        return header, stores

    def save(self, path: Path, stores: dict, meta: dict | None = None) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        nn.save_checkpoint(path, stores, self.seed, self.cfg_hash, meta)
        (path.parent / "config.toml").write_text(dumps_config(self.cfg))

    def dynamics(self, train: Dataset, train_if_missing: bool = True) -> DynamicModel:
        path = self.fold_dir / "dynamics.ckpt.json"
        if not path.exists() and train_if_missing:
            return self.train_dynamics(train)
        header, stores = self._check(path)
        model = DynamicModel(self.cfg.pipeline(self.seed).dynamics, train.catalog, header["meta"]["profile_dim"],
                             seed=0)
        model.store.load_values(stores["dynamics"].values())
        return model

    def train_dynamics(self, train: Dataset) -> DynamicModel:
        model, curve = train_dynamic_model(train, self.cfg.pipeline(self.seed).dynamics)
        self.save(self.fold_dir / "dynamics.ckpt.json", {"dynamics": model.store},
                  {"profile_dim": model.profile_dim})
        write_curve_csv(curve, self.fold_dir / "dynamics_curve.csv")
        return model

    def actor(self, path: Path, model: DynamicModel) -> Actor:
        _, stores = self._check(path)
        hidden = stores["actor"]["a1.b"].shape[0]
        actor = Actor(model.cfg.hidden_dim + model.cfg.features.embedding_dim, model.story_features(), hidden,
                      np.random.default_rng(0))
        actor.store.load_values(stores["actor"].values())
        return actor

    def pi0(self, model: DynamicModel, train: Dataset, train_if_missing: bool = True) -> Actor:
        path = self.fold_dir / "pi0.ckpt.json"
        if not path.exists() and train_if_missing:
            return self.train_pi0(model, train)
        return self.actor(path, model)

    def train_pi0(self, model: DynamicModel, train: Dataset) -> Actor:
        hist: list = []
        pi0 = controller_imitation(session_table(model, train), model, self.cfg.imitation,
                                   seed=stage_seed(self.seed, "imitation"), history=hist)
        self.save(self.fold_dir / "pi0.ckpt.json", {"actor": pi0.store})
        _dump_json({"imitation_loss": hist}, self.fold_dir / "pi0_report.json")
        return pi0


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args, cfg: RunConfig) -> int:
    env = build_env(cfg)
    data, folds = generate(cfg, args.seed, env)
    root = Path(args.out) / f"seed-{args.seed}"
    root.mkdir(parents=True, exist_ok=True)
    save_dataset(data, root / "data.jsonl")
    sim.save_env_params(env, root / "env.toml")
    (root / "config.toml").write_text(dumps_config(cfg))
    _dump_json({
        "seed": args.seed, "scenario": cfg.run.scenario,
        "scenario_hash": nn.config_hash({"scenario": (root / "env.toml").read_text()}),
        "config_hash": nn.config_hash(cfg.to_dict()),
        "n_episodes": len(data), "n_sessions": data.n_sessions,
        "folds": [[e.user_id for e in f] for f in folds],
    }, root / "manifest.json")
    print(f"wrote {len(data)} episodes ({data.n_sessions} sessions) to {root / 'data.jsonl'}")
    return 0


def cmd_train_dynamics(args, cfg: RunConfig) -> int:
    ws = Workspace(args, cfg)
    train, _ = ws.split()
    ws.train_dynamics(train)
    print(f"wrote {ws.fold_dir / 'dynamics.ckpt.json'}")
    return 0


def cmd_imitate(args, cfg: RunConfig) -> int:
    ws = Workspace(args, cfg)
    train, _ = ws.split()
    ws.train_pi0(ws.dynamics(train), train)
    print(f"wrote {ws.fold_dir / 'pi0.ckpt.json'}")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    ws = Workspace(args, cfg)
    train, _ = ws.split()
    model = ws.dynamics(train)
    pi0 = ws.pi0(model, train)
    variant = Variant(args.variant)
    result = run_dress_pipeline(train, variant, cfg.pipeline(args.seed), model=model, pi0=pi0)
    out = ws.fold_dir / variant.value
    stores = {"actor": result.actor.store}
    ws.save(out / "actor.ckpt.json", stores)
    if result.critic is not None:
        ws.save(out / "critic.ckpt.json", {"critic": result.critic.store})
    for i, batch in enumerate(result.imagined):
        d = out / "drl" / f"iter-{i}"
        d.mkdir(parents=True, exist_ok=True)
        for name in batch.__dataclass_fields__:
            np.save(d / f"{name}.npy", getattr(batch, name))
    _dump_json({"config": cfg.to_dict(), "config_hash": ws.cfg_hash, "fold": ws.fold, **result.report},
               out / "report.json")
    print(f"wrote {out}")
    return 0


def _trained(ws: Workspace, train: Dataset) -> tuple[DynamicModel, dict]:
    model = ws.dynamics(train, train_if_missing=False)
    actors = {"pi0": ws.pi0(model, train, train_if_missing=False)}
    for v in Variant:
        path = ws.fold_dir / v.value / "actor.ckpt.json"
        if path.exists():
            actors[v.value] = ws.actor(path, model)
    return model, actors


def cmd_evaluate(args, cfg: RunConfig) -> int:
    ws = Workspace(args, cfg)
    train, test = ws.split()
    model, actors = _trained(ws, train)
    fe = fold_evaluation(model, actors, test)
    report = compare_folds([fe], cfg.eval)
    out = ws.fold_dir / "eval"
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "evaluation.csv")
    report.write_differences_csv(out / "differences.csv")
    write_sweep_csv(horizon_sweep([fe], range(1, cfg.eval.horizon + 1), cfg.eval.reward), out / "horizon_sweep.csv")
    payload = json.loads(report.to_json())
    if (ws.root / "env.toml").exists():
        env = sim.load_env_params(ws.root / "env.toml")
        payload["true_return"] = true_returns(env, model, actors, test, ws.seed, cfg.eval.horizon, cfg.ppo.gamma)
    payload["config_hash"] = ws.cfg_hash
    _dump_json(payload, out / "report.json")
    for row in report.summary():
        print(f"{row['method']:8s} {row['metric']}  {row['mean']:.4f}  {row['improvement']:+.2f}%")
    return 0


def cmd_horizon_sweep(args, cfg: RunConfig) -> int:
    ws = Workspace(args, cfg)
    train, test = ws.split()
    fe = fold_evaluation(*_trained(ws, train), test)
    rows = horizon_sweep([fe], range(1, args.max_horizon + 1), cfg.eval.reward)
    out = ws.fold_dir / "eval"
    out.mkdir(parents=True, exist_ok=True)
    write_sweep_csv(rows, out / "horizon_sweep.csv")
    print(f"wrote {out / 'horizon_sweep.csv'}")
    return 0


def cmd_grad_check(args, cfg: RunConfig) -> int:
    results = run_checks(args.seeds)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:26s} max rel err {r.max_rel_error:.3e} over {r.seeds} seeds")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"gradient check failed (tolerance {TOLERANCE:g}): {', '.join(failed)}")
        return 1
    return 0


def cmd_report(args, cfg: RunConfig) -> int:
    ws = Workspace(args, cfg)
    summary = {"seed": ws.seed, "fold": ws.fold, "runs": {}}
    for v in Variant:
        path = ws.fold_dir / v.value / "report.json"
        if path.exists():
            rep = json.loads(path.read_text())
            summary["runs"][v.value] = {k: rep[k] for k in ("logged_update", "imagination", "dnnc_loss") if k in rep}
    eval_path = ws.fold_dir / "eval" / "report.json"
    if eval_path.exists():
        ev = json.loads(eval_path.read_text())
        summary["evaluation"] = ev["summary"]
        summary["differences"] = ev["differences"]
        summary["true_return"] = ev.get("true_return")
    if not summary["runs"] and "evaluation" not in summary:
        raise DataError(f"nothing to report under {ws.fold_dir}")
    _dump_json(summary, ws.fold_dir / "summary.json")
    for row in summary.get("evaluation", []):
        print(f"{row['method']:8s} {row['metric']}  mean {row['mean']:.4f}  {row['improvement']:+.2f}% {row['significance']}")
    for row in summary.get("differences", []):
        print(f"{row['method']:8s} log-ratio {row['log_ratio']:+.4f}  tv {row['tv']:.4f}  kl {row['kl']:.4f}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file")
    common.add_argument("--set", action="append", default=[], metavar="TABLE.KEY=VALUE",
                        help="override a config value (repeatable)")
    common.add_argument("--out", default=os.environ.get(OUTPUT_ENV, "runs"),
                        help=f"output root (default ${OUTPUT_ENV} or ./runs)")
    common.add_argument("-v", "--verbose", action="store_true")

    seeded = argparse.ArgumentParser(add_help=False)
    seeded.add_argument("--seed", type=int, required=True)

    folded = argparse.ArgumentParser(add_help=False)
    folded.add_argument("--fold", type=int, default=0, help="test fold (the rest is training data)")

    p = argparse.ArgumentParser(prog="dress", description="Story recommendation with a learned simulator.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common, seeded], help="simulate a logged dataset").set_defaults(fn=cmd_gen_data)
    sub.add_parser("train-dynamics", parents=[common, seeded, folded],
                   help="fit the dynamic model").set_defaults(fn=cmd_train_dynamics)
    sub.add_parser("imitate", parents=[common, seeded, folded],
                   help="fit the imitation policy").set_defaults(fn=cmd_imitate)
    t = sub.add_parser("train", parents=[common, seeded, folded], help="train one policy variant")
    t.add_argument("--variant", required=True, choices=[v.value for v in Variant])
    t.set_defaults(fn=cmd_train)
    sub.add_parser("evaluate", parents=[common, seeded, folded],
                   help="offline evaluation of trained variants").set_defaults(fn=cmd_evaluate)
    h = sub.add_parser("horizon-sweep", parents=[common, seeded, folded], help="TWIS improvement versus horizon")
    h.add_argument("--max-horizon", type=int, default=15)
    h.set_defaults(fn=cmd_horizon_sweep)
    g = sub.add_parser("grad-check", parents=[common], help="finite-difference gradient certification")
    g.add_argument("--seeds", type=int, default=50)
    g.set_defaults(fn=cmd_grad_check)
    sub.add_parser("report", parents=[common, seeded, folded],
                   help="summarize a fold's reports").set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.set)
        return args.fn(args, cfg)
    except (ConfigError, ContractError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
