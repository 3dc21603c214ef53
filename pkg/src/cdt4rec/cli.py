"""Command-line entry point: generate, ingest, train, eval, gradcheck.

Settings come from a flat ``key = value`` file (``--config``) and are then
overridden by ``--key value`` pairs.  Every run writes into its own
directory ``<out>/<command>-<timestamp>-seed<seed>`` together with the
fully-resolved config.

Exit codes: 0 success, 1 usage/config error, 2 runtime/numeric error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional


from . import archive
from .config import ConfigError, ModelConfig, coerce, format_kv, read_kv, _field_kind
from .data import (DatasetFormatError, EmaEncoderConfig, ingest_ratings_file, load_dataset,
                   save_dataset)
from .env import EnvSpec, OraclePolicy, RecEnv, collect_dataset, default_target_rtg, evaluate_policy
from .evaluation import ModelPolicy, rank_metrics
from .gradcheck import check_model_gradients, tiny_config, toy_batch
from .model import CDT4Rec
from .training import (METRICS_HEADER, TrainConfig, TrainingDivergedError, TrainState,
                       load_checkpoint, save_checkpoint, train_steps)

log = logging.getLogger("cdt4rec")

COMMANDS = ("generate", "ingest", "train", "eval", "gradcheck")


@dataclass
class RunConfig:
    # paths
    out: str = "runs"
    spec: Optional[str] = None
    dataset: Optional[str] = None
    checkpoint: Optional[str] = None
    csv: Optional[str] = None
    # environment (env_seed seeds EnvSpec items and projection; seed is the run seed)
    m: int = 50
    d_s: int = 16
    latent_dim: int = 8
    horizon: int = 20
    drift: float = 0.1
    temperature: float = 0.2
    env_seed: int = 0
    # generate / ingest
    n: int = 100
    epsilon: float = 0.1
    max_rating: float = 5.0
    threshold: float = 0.75
    encoder_decay: float = 0.9
    # model
    d_h: int = 32
    n_heads: int = 2
    n_layers: int = 3
    d_ff: Optional[int] = None
    rtg_scale: float = 1.0
    same_step: str = "ordered"
    ln_eps: float = 1e-5
    # training, shared run seed
    K: int = 2
    batch_size: int = 64
    n_it: int = 1000
    lr: float = 1e-3
    weight_decay: float = 1e-4
    clip_norm: float = 1.0
    rtg_gamma: float = 1.0
    dropout: float = 0.1
    seed: int = 0
    lambda_e: float = 1.0
    lambda_g: float = 1.0
    warmup: int = 0
    # eval
    mode: str = "rollout"
    episodes: int = 500
    target_rtg: Optional[float] = None
    k: int = 10
    eval_seed: int = 12345
    # gradcheck
    corrupt: Optional[str] = None
    tolerance: float = 1e-4

    def env_spec(self) -> EnvSpec:
        return EnvSpec(self.m, self.d_s, self.latent_dim, self.horizon, self.drift,
                       self.temperature, self.env_seed)

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in dataclasses.asdict(self).items() if k in names})

    def model_config(self, state_dim: int, num_items: int, max_timestep: int) -> ModelConfig:
        return ModelConfig(state_dim=state_dim, num_items=num_items, max_timestep=max_timestep,
                           d_h=self.d_h, n_heads=self.n_heads, n_layers=self.n_layers, d_ff=self.d_ff,
                           dropout=self.dropout, ln_eps=self.ln_eps, rtg_scale=self.rtg_scale,
                           same_step=self.same_step)


class UsageError(Exception):
    pass


class RuntimeFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def resolve_config(config_path: Optional[str], overrides: list[str]) -> tuple[RunConfig, set[str]]:
    """Config file first, then ``--key value`` overrides; returns the config and explicitly set keys."""
    values: dict[str, str] = {}
    if config_path:
        try:
            values.update(read_kv(config_path))
        except OSError as exc:
            raise UsageError(f"cannot read config {config_path}: {exc}") from None
    it = iter(overrides)
    for tok in it:
        if not tok.startswith("--"):
            raise UsageError(f"unexpected argument {tok!r}")
        key = tok[2:].replace("-", "_")
        if "=" in key:
            key, val = key.split("=", 1)
        else:
            val = next(it, None)
            if val is None:
                raise UsageError(f"missing value for --{key}")
        values[key] = val
    known = {f.name: f for f in fields(RunConfig)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    kwargs = {}
    for key, raw in values.items():
        try:
            kwargs[key] = coerce(raw, _field_kind(known[key]))
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from None
    cfg = RunConfig(**kwargs)
    try:
        cfg.env_spec()
        cfg.train_config()
        cfg.model_config(1, 1, 1)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg, set(values)


def make_run_dir(cfg: RunConfig, command: str) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = Path(cfg.out) / f"{command}-{stamp}-seed{cfg.seed}"
    path, n = base, 1
    while path.exists():
        n += 1
        path = base.with_name(f"{base.name}-{n}")
    path.mkdir(parents=True)
    return path


def _write_config(run_dir: Path, cfg: RunConfig) -> None:
    text = format_kv(dataclasses.asdict(cfg))
    (run_dir / "config.txt").write_text(text, encoding="utf-8")
    log.info("resolved config:\n%s", text)


def _env_spec(cfg: RunConfig) -> EnvSpec:
    if not cfg.spec:
        return cfg.env_spec()
    try:
        return EnvSpec.read(cfg.spec)
    except OSError as exc:
        raise RuntimeFailure(f"cannot read env spec {cfg.spec}: {exc}") from None


def _require(cfg: RunConfig, key: str) -> str:
    val = getattr(cfg, key)
    if not val:
        raise UsageError(f"--{key} is required for this command")
    return val


def cmd_generate(cfg: RunConfig, explicit: set[str], run_dir: Path) -> dict:
    spec = _env_spec(cfg)
    env = RecEnv(spec)
    if cfg.n < 1:
        raise UsageError("--n must be >= 1")
    ds = collect_dataset(env, OraclePolicy(env, cfg.epsilon, seed=cfg.seed), cfg.n,
                         seed=cfg.seed, gamma=cfg.rtg_gamma)
    path = run_dir / "dataset.bin"
    save_dataset(path, ds)
    (run_dir / "env_spec.txt").write_text(spec.to_text(), encoding="utf-8")
    return {"dataset": str(path), "trajectories": len(ds), "steps": int(ds.lengths.sum()),
            "mean_return": float(ds.returns.mean())}


def cmd_ingest(cfg: RunConfig, explicit: set[str], run_dir: Path) -> dict:
    csv_path = _require(cfg, "csv")
    enc = EmaEncoderConfig(dim=cfg.d_s, decay=cfg.encoder_decay, seed=cfg.seed)
    try:
        res = ingest_ratings_file(csv_path, cfg.max_rating, threshold_fraction=cfg.threshold,
                                  encoder=enc, gamma=cfg.rtg_gamma)
    except OSError as exc:
        raise RuntimeFailure(f"cannot read {csv_path}: {exc}") from None
    except ValueError as exc:
        raise RuntimeFailure(str(exc)) from None
    path = run_dir / "dataset.bin"
    save_dataset(path, res.dataset)
    report = "".join(f"line {n}: {why}\n" for n, why in res.skipped)
    (run_dir / "skipped.txt").write_text(report, encoding="utf-8")
    return {"dataset": str(path), "trajectories": len(res.dataset), "items": res.dataset.num_items,
            "steps": int(res.dataset.lengths.sum()), "skipped": res.skipped_count}


def _load_dataset(path: str):
    try:
        return load_dataset(path)
    except (OSError, DatasetFormatError) as exc:
        raise RuntimeFailure(f"cannot load dataset {path}: {exc}") from None


def cmd_train(cfg: RunConfig, explicit: set[str], run_dir: Path) -> dict:
    ds = _load_dataset(_require(cfg, "dataset"))
    if not len(ds):
        raise RuntimeFailure("dataset is empty")
    tc = cfg.train_config()
    mc = cfg.model_config(ds.state_dim, ds.num_items, int(ds.lengths.max()) + cfg.horizon)
    state = TrainState.create(mc, tc)
    with open(run_dir / "metrics.txt", "w", encoding="utf-8") as fh:
        fh.write(METRICS_HEADER)
        try:
            train_steps(state, ds, tc.n_it, fh)
        except TrainingDivergedError as exc:
            raise RuntimeFailure(str(exc)) from None
    ckpt = run_dir / "checkpoint.bin"
    save_checkpoint(ckpt, state)
    out = {"checkpoint": str(ckpt), "iterations": state.iteration}
    if state.history:
        out["initial_loss_total"] = state.history[0][1]
        out["final_loss_total"] = state.history[-1][1]
    return out


def _check_dims(model: CDT4Rec, num_items: int, state_dim: int, horizon: int) -> None:
    mc = model.cfg
    if mc.num_items != num_items:
        raise RuntimeFailure(f"dimension mismatch: array param/embed.E_a has {mc.num_items} rows "
                             f"but the data has {num_items} items")
    if mc.state_dim != state_dim:
        raise RuntimeFailure(f"dimension mismatch: array param/embed.W_s has {mc.state_dim} input rows "
                             f"but states have dimension {state_dim}")
    if mc.max_timestep < horizon:
        raise RuntimeFailure(f"dimension mismatch: array param/embed.P covers {mc.max_timestep} "
                             f"timesteps but the horizon is {horizon}")


def cmd_eval(cfg: RunConfig, explicit: set[str], run_dir: Path) -> dict:
    ckpt = _require(cfg, "checkpoint")
    try:
        state = load_checkpoint(ckpt)
    except (OSError, archive.ArchiveError) as exc:
        raise RuntimeFailure(f"cannot load checkpoint {ckpt}: {exc}") from None
    model = state.model
    K = state.config.K if "K" not in explicit else cfg.K
    if cfg.mode == "rollout":
        spec = _env_spec(cfg)
        _check_dims(model, spec.m, spec.d_s, spec.horizon)
        target = cfg.target_rtg
        if target is None:
            target = default_target_rtg(_load_dataset(cfg.dataset)) if cfg.dataset else 0.9 * spec.horizon
        metrics = evaluate_policy(RecEnv(spec), ModelPolicy(model, K), cfg.episodes, target,
                                  seed=cfg.eval_seed, rtg_gamma=state.config.rtg_gamma).as_dict()
        metrics["target_rtg"] = target
    elif cfg.mode == "rank":
        ds = _load_dataset(_require(cfg, "dataset"))
        _check_dims(model, ds.num_items, ds.state_dim, int(ds.lengths.max()))
        try:
            metrics = rank_metrics(model, ds, cfg.k, K)
        except ValueError as exc:
            raise RuntimeFailure(str(exc)) from None
    else:
        raise UsageError(f"--mode must be rollout or rank, got {cfg.mode!r}")
    (run_dir / "metrics.txt").write_text(format_kv(metrics), encoding="utf-8")
    return metrics


def cmd_gradcheck(cfg: RunConfig, explicit: set[str], run_dir: Path) -> dict:
    mc, tc = tiny_config(cfg.K if "K" in explicit else 2)
    changes = {k: getattr(cfg, k) for k in ("d_h", "n_heads", "n_layers", "d_ff", "same_step")
               if k in explicit}
    if changes:
        mc = dataclasses.replace(mc, **changes)
    if mc.d_h > 8:
        raise UsageError(f"gradcheck needs tiny dimensions (d_h <= 8), got d_h={mc.d_h}")
    model = CDT4Rec(mc, seed=cfg.seed)
    errors = check_model_gradients(model, toy_batch(mc, tc.K, seed=cfg.seed), tc, corrupt=cfg.corrupt)
    failed = [g for g, e in errors.items() if e > cfg.tolerance]
    (run_dir / "gradcheck.txt").write_text(format_kv(errors), encoding="utf-8")
    for g, e in errors.items():
        print(f"{'FAIL' if g in failed else 'pass'} {g}: max rel err {e:.3e}")
    if failed:
        raise RuntimeFailure(f"gradient check failed for: {', '.join(failed)}")
    return {"max_rel_error": max(errors.values())}


HANDLERS = {"generate": cmd_generate, "ingest": cmd_ingest, "train": cmd_train,
            "eval": cmd_eval, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = _Parser(prog="cdt4rec", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="flat key = value settings file")
    try:
        args, rest = parser.parse_known_args(argv)
        cfg, explicit = resolve_config(args.config, rest)
        run_dir = make_run_dir(cfg, args.command)
        _write_config(run_dir, cfg)
        result = HANDLERS[args.command](cfg, explicit, run_dir)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (RuntimeFailure, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"run_dir = {run_dir}")
    sys.stdout.write(format_kv(result))
    return 0


if __name__ == "__main__":
    sys.exit(main())
