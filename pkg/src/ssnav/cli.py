"""Command-line entry point: ``ssnav <subcommand> CONFIG [flags]``.

Every subcommand reads one ``key = value`` config file (header
``ssnav-config v1``), writes into a single output directory, and echoes the
fully resolved config there. Exit codes: 0 success, 2 bad config or flags,
3 runtime failure (missing or mismatched artifacts).
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from . import experiment
from .evaluation import dump_episodes, parse_episodes, report, run_eval
from .model import RandomPolicy, load_policy, save_policy
from .reward import RewardConfig, RewardState, semantic_reward
from .semantic import ClassSplit, EmbeddingError, load_embeddings, save_embeddings, synth_embeddings
from .tensor import CheckpointError
from .training import TrainConfig, derive_seed, train, world_pool_seeds
from .world import Action, WorldError, WorldSpec, gen_world, load_world, render, save_world, step, visible_classes

CONFIG_HEADER = "ssnav-config v1"
MANIFEST_HEADER = "ssnav-manifest v1"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

ENV_OUT_DIR = "SSNAV_OUT_DIR"
ENV_THREADS = "SSNAV_THREADS"


class ConfigError(ValueError):
    pass


class RunError(RuntimeError):
    pass


# ---------------------------------------------------------------- config


def _default_classes() -> tuple[tuple, tuple, tuple, tuple]:
    split, names, clusters = experiment.household_split()
    return split.seen, split.unseen, split.irrelevant, tuple(f"{n}:{c}" for n, c in zip(names, clusters))


_SEEN, _UNSEEN, _IRRELEVANT, _CLUSTERS = _default_classes()


@dataclass
class TrainSection:
    model: str = "ssnet"
    use_attention: bool = True
    partial_reward: bool = True
    episodes_total: int = 50_000
    max_steps: int = 50
    gamma: float = 0.99
    entropy_weight: float = 0.01
    value_weight: float = 0.5
    n_workers: int = 1
    lr: float = 1e-4
    optimizer: str = "adam"
    grad_clip: float = 40.0
    d_in: int = 16
    d_k: int = 16
    d_out: int = 16
    hidden: int = 64
    log_every: int = 500
    log_wall_time: bool = True


@dataclass
class EvalSection:
    n_episodes: int = 250
    mode: str = "greedy"
    max_steps: int = 50


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    seen: tuple = _SEEN
    unseen: tuple = _UNSEEN
    irrelevant: tuple = _IRRELEVANT
    clusters: tuple = _CLUSTERS
    embed_dim: int = 32
    n_train_worlds: int = 8
    n_test_worlds: int = 4
    world: WorldSpec = field(default_factory=lambda: WorldSpec(co_location_bias=0.6))
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    @property
    def split(self) -> ClassSplit:
        try:
            return ClassSplit(tuple(self.seen), tuple(self.unseen), tuple(self.irrelevant))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def cluster_ids(self) -> dict[str, int]:
        out = {}
        for item in self.clusters:
            name, _, cid = item.partition(":")
            try:
                out[name] = int(cid)
            except ValueError:
                raise ConfigError(f"cluster entry {item!r} is not name:id") from None
        return out

    def out(self) -> Path:
        return Path(self.out_dir)


_SECTIONS = ("world", "train", "eval")


def _coerce(raw: str, default, key: str):
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false"):
                raise ValueError(f"expected true/false, got {raw!r}")
            return low == "true"
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            kind = type(default[0]) if default else str
            return tuple(kind(s) for s in items)
        return raw
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def parse_config(text: str) -> RunConfig:
    lines = text.splitlines()
    if not lines or lines[0].strip() != CONFIG_HEADER:
        raise ConfigError(f"config must start with {CONFIG_HEADER!r}")
    cfg = RunConfig()
    top = {f.name for f in fields(RunConfig)} - set(_SECTIONS)
    sections = {name: getattr(cfg, name) for name in _SECTIONS}
    updates: dict[str, dict] = {name: {} for name in _SECTIONS}
    for lineno, raw in enumerate(lines[1:], 2):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        section, _, name = key.rpartition(".")
        if section:
            if section not in sections or name not in {f.name for f in fields(sections[section])}:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            updates[section][name] = _coerce(value, getattr(sections[section], name), key)
        else:
            if name not in top:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            setattr(cfg, name, _coerce(value, getattr(cfg, name), key))
    try:
        for name in _SECTIONS:
            setattr(cfg, name, replace(sections[name], **updates[name]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def dump_config(cfg: RunConfig) -> str:
    lines = [CONFIG_HEADER]
    for f in fields(RunConfig):
        value = getattr(cfg, f.name)
        if f.name in _SECTIONS:
            lines += [f"{f.name}.{g.name} = {_format(getattr(value, g.name))}" for g in fields(value)]
        else:
            lines.append(f"{f.name} = {_format(value)}")
    return "\n".join(lines) + "\n"


def load_config(path: str | Path, out_dir: str | None = None, threads: int | None = None) -> RunConfig:
    """Read a config file; then ``SSNAV_*`` env vars, then explicit flags, take precedence."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    cfg = parse_config(text)
    env_out = os.environ.get(ENV_OUT_DIR)
    env_threads = os.environ.get(ENV_THREADS)
    if env_out:
        cfg.out_dir = env_out
    if env_threads:
        cfg.train = replace(cfg.train, n_workers=_coerce(env_threads, 1, ENV_THREADS))
    if out_dir is not None:
        cfg.out_dir = out_dir
    if threads is not None:
        cfg.train = replace(cfg.train, n_workers=threads)
    if cfg.train.n_workers < 1:
        raise ConfigError("thread count must be >= 1")
    return cfg


def echo_config(cfg: RunConfig, command: str) -> None:
    out = cfg.out()
    out.mkdir(parents=True, exist_ok=True)
    (out / f"config.{command}.txt").write_text(dump_config(cfg), encoding="utf-8")


# ---------------------------------------------------------------- artifacts


def embeddings_path(cfg: RunConfig) -> Path:
    return cfg.out() / "embeddings.txt"


def manifest_path(cfg: RunConfig) -> Path:
    return cfg.out() / "manifest.txt"


def checkpoint_path(cfg: RunConfig) -> Path:
    return cfg.out() / "checkpoint.ckpt"


def load_table(cfg: RunConfig, path: Path | None = None):
    path = path or embeddings_path(cfg)
    if not path.exists():
        raise RunError(f"embedding file {path} not found; run gen-embeddings first")
    return load_embeddings(path, cfg.split.all_classes)


def write_manifest(path: Path, seed: int, entries: list[tuple[str, str, int]]) -> None:
    lines = [MANIFEST_HEADER, f"seed = {seed}"] + [f"{pool} {rel} {s}" for pool, rel, s in entries]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path: Path) -> dict[str, list]:
    """Returns ``{"train": [GridWorld...], "test": [...]}``; world paths are relative to the manifest."""
    if not path.exists():
        raise RunError(f"manifest {path} not found; run gen-worlds first")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != MANIFEST_HEADER:
        raise RunError(f"{path}: expected header {MANIFEST_HEADER!r}")
    pools: dict[str, list] = {"train": [], "test": []}
    for raw in lines[1:]:
        parts = raw.split()
        if not parts or "=" in raw:
            continue
        if len(parts) != 3 or parts[0] not in pools:
            raise RunError(f"{path}: bad manifest line {raw!r}")
        world = load_world(path.parent / parts[1])
        if world.seed != int(parts[2]):
            raise RunError(f"{parts[1]}: seed {world.seed} does not match the manifest")
        pools[parts[0]].append(world)
    if set(w.seed for w in pools["train"]) & set(w.seed for w in pools["test"]):
        raise RunError(f"{path}: train and test pools share worlds")
    return pools


def train_config(cfg: RunConfig, table, worlds, **overrides) -> TrainConfig:
    t = cfg.train
    kwargs = dict(
        split=cfg.split, embeddings=table, episodes_total=t.episodes_total, max_steps=t.max_steps, gamma=t.gamma,
        entropy_weight=t.entropy_weight, value_weight=t.value_weight, n_workers=t.n_workers, lr=t.lr,
        optimizer=t.optimizer, grad_clip=t.grad_clip, seed=derive_seed(cfg.seed, "train"), world_seed=cfg.seed,
        n_train_worlds=len(worlds), world_spec=cfg.world, reward=RewardConfig(partial_reward_enabled=t.partial_reward),
        model=t.model, use_attention=t.use_attention, d_in=t.d_in, d_k=t.d_k, d_out=t.d_out, hidden=t.hidden,
        log_every=t.log_every, log_wall_time=t.log_wall_time, train_worlds=worlds,
    )
    kwargs.update(overrides)
    try:
        return TrainConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _relative(path: Path, start: Path) -> str:
    return os.path.relpath(path, start)


# ---------------------------------------------------------------- commands


def cmd_gen_embeddings(cfg: RunConfig, args) -> int:
    split = cfg.split
    clusters = cfg.cluster_ids()
    names = list(split.all_classes)
    missing = [n for n in names if n not in clusters]
    if missing:
        raise ConfigError(f"no cluster id for classes {missing}")
    table = synth_embeddings(derive_seed(cfg.seed, "embeddings"), names, cfg.embed_dim, [clusters[n] for n in names])
    echo_config(cfg, "gen-embeddings")
    save_embeddings(table, embeddings_path(cfg))
    print(f"wrote {embeddings_path(cfg)} ({len(table)} classes, dim {table.dim})")
    return EXIT_OK


def cmd_gen_worlds(cfg: RunConfig, args) -> int:
    count = args.count if args.count is not None else cfg.n_train_worlds + cfg.n_test_worlds
    n_test = args.n_test if args.n_test is not None else (cfg.n_test_worlds if args.count is None else count // 3)
    if count < 0 or not 0 <= n_test <= count:
        raise ConfigError("need count >= 0 and 0 <= n_test <= count")
    table = load_table(cfg)
    train_seeds, test_seeds = world_pool_seeds(cfg.seed, count - n_test, n_test)
    echo_config(cfg, "gen-worlds")
    wdir = cfg.out() / "worlds"
    wdir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (pool, seed) in enumerate([("train", s) for s in train_seeds] + [("test", s) for s in test_seeds]):
        world = gen_world(seed, cfg.world, cfg.split, table)
        rel = f"worlds/world_{i:03d}.txt"
        save_world(world, cfg.out() / rel)
        entries.append((pool, rel, seed))
    write_manifest(manifest_path(cfg), cfg.seed, entries)
    print(f"wrote {len(entries)} worlds ({len(train_seeds)} train / {len(test_seeds)} test) and {manifest_path(cfg)}")
    return EXIT_OK


def _train_one(cfg: RunConfig, table, worlds, dest: Path, label: str, **overrides):
    tcfg = train_config(cfg, table, worlds, **overrides)
    dest.mkdir(parents=True, exist_ok=True)

    def progress(row):
        print(f"[{label}] episode {row.episode}: return {row.moving_avg_return:.3f} success {row.moving_avg_success:.3f}")

    result = train(tcfg, on_log=progress)
    save_policy(dest / "checkpoint.ckpt", result.policy, result.optimizer, {"seed": cfg.seed})
    (dest / "train_log.csv").write_text(result.log_text(), encoding="utf-8")
    return result


def cmd_train(cfg: RunConfig, args) -> int:
    table = load_table(cfg)
    pools = read_manifest(manifest_path(cfg))
    if not pools["train"]:
        raise RunError("manifest has no training worlds")
    echo_config(cfg, "train")
    _train_one(cfg, table, pools["train"], cfg.out(), "train")
    print(f"wrote {checkpoint_path(cfg)}")
    return EXIT_OK


def _evaluate(cfg: RunConfig, policy, table, worlds, dest: Path, mode: str, label: str, checkpoint: Path | None):
    dest.mkdir(parents=True, exist_ok=True)
    results = run_eval(policy, cfg.split, worlds, cfg.eval.n_episodes, derive_seed(cfg.seed, "eval"), mode, max_steps=cfg.eval.max_steps)
    rep = report(results, cfg.split)
    header = [
        f"manifest = {_relative(manifest_path(cfg), dest)}",
        f"embeddings = {_relative(embeddings_path(cfg), dest)}",
        f"checkpoint = {_relative(checkpoint, dest) if checkpoint else 'none'}",
        f"policy = {policy.kind}",
        f"mode = {mode}",
        f"seen = {','.join(cfg.split.seen)}",
        f"unseen = {','.join(cfg.split.unseen)}",
        f"irrelevant = {','.join(cfg.split.irrelevant)}",
        f"partial_reward = {_format(cfg.train.partial_reward)}",
    ]
    (dest / "episodes.csv").write_text(dump_episodes(results, header), encoding="utf-8")
    (dest / "report.csv").write_text(rep.to_csv(), encoding="utf-8")
    (dest / "report.txt").write_text(rep.to_text(label) + "\n", encoding="utf-8")
    return rep


def cmd_eval(cfg: RunConfig, args) -> int:
    table = load_table(cfg)
    pools = read_manifest(Path(args.manifest) if args.manifest else manifest_path(cfg))
    worlds = pools[args.pool]
    if not worlds:
        raise RunError(f"manifest has no {args.pool} worlds")
    mode = args.mode or cfg.eval.mode
    if args.random:
        policy, ckpt = RandomPolicy(), None
        mode = "sample"
    else:
        ckpt = Path(args.checkpoint) if args.checkpoint else checkpoint_path(cfg)
        if not ckpt.exists():
            raise RunError(f"checkpoint {ckpt} not found; run train first")
        policy, _, _ = load_policy(ckpt, cfg.split, table, kind=args.kind)
    echo_config(cfg, "eval")
    dest = cfg.out() / (args.name or "eval")
    rep = _evaluate(cfg, policy, table, worlds, dest, mode, policy.kind, ckpt)
    print(rep.to_text(policy.kind))
    print(f"wrote {dest}/report.txt, report.csv, episodes.csv")
    return EXIT_OK


def ablation_variants(no_sa: bool, no_pr: bool) -> list[tuple[str, dict]]:
    """Variant rows, cumulative in the order attention then partial reward."""
    variants = [("full", {})]
    if no_sa:
        variants.append(("no-sa", {"use_attention": False}))
    if no_pr:
        base = dict(variants[-1][1])
        name = "no-sa-no-pr" if no_sa else "no-pr"
        variants.append((name, {**base, "reward": RewardConfig(partial_reward_enabled=False)}))
    return variants


def cmd_ablate(cfg: RunConfig, args) -> int:
    if not (args.no_self_attention or args.no_partial_reward):
        raise ConfigError("ablate needs --no-self-attention and/or --no-partial-reward")
    if cfg.train.model != "ssnet":
        raise ConfigError("ablations apply to the ssnet model")
    table = load_table(cfg)
    pools = read_manifest(manifest_path(cfg))
    echo_config(cfg, "ablate")
    csv = ["variant,group,bucket,SR,SPL,N"]
    text = []
    for name, overrides in ablation_variants(args.no_self_attention, args.no_partial_reward):
        dest = cfg.out() / "ablate" / name
        result = _train_one(cfg, table, pools["train"], dest, name, **overrides)
        rep = _evaluate(cfg, result.policy, table, pools["test"], dest, cfg.eval.mode, name, dest / "checkpoint.ckpt")
        csv += [f"{name},{line}" for line in rep.to_csv().splitlines()[1:]]
        text.append(rep.to_text(name))
    (cfg.out() / "ablation.csv").write_text("\n".join(csv) + "\n", encoding="utf-8")
    (cfg.out() / "ablation.txt").write_text("\n\n".join(text) + "\n", encoding="utf-8")
    print("\n\n".join(text))
    return EXIT_OK


def replay_frames(log_path: Path, index: int) -> list[str]:
    """Step-by-step rendering of one logged episode: map, pose, visible objects, reward."""
    if not log_path.exists():
        raise RunError(f"episode log {log_path} not found")
    meta, results = parse_episodes(log_path.read_text(encoding="utf-8"))
    if not 0 <= index < len(results):
        raise RunError(f"episode index {index} out of range (log has {len(results)})")
    try:
        split = ClassSplit(
            tuple(s for s in meta["seen"].split(",") if s),
            tuple(s for s in meta["unseen"].split(",") if s),
            tuple(s for s in meta["irrelevant"].split(",") if s),
        )
        base = log_path.parent
        pools = read_manifest(base / meta["manifest"])
        table = load_embeddings(base / meta["embeddings"], split.all_classes)
        reward_cfg = RewardConfig(partial_reward_enabled=meta.get("partial_reward", "true") == "true")
    except KeyError as exc:
        raise RunError(f"episode log header lacks {exc}") from None
    ep = results[index]
    worlds = {w.seed: w for pool in pools.values() for w in pool}
    if ep.world_seed not in worlds:
        raise RunError(f"world {ep.world_seed} is not in the manifest")
    world = worlds[ep.world_seed]
    frames = [
        f"episode {index}: target={ep.target} ({ep.group}) world={ep.world_seed} "
        f"start=({ep.start.x},{ep.start.y}) heading={ep.start.heading} tilt={ep.start.tilt} "
        f"optimal={ep.optimal_length} success={int(ep.success)}"
    ]
    goal = [(o.x, o.y) for o in world.objects if o.class_name == ep.target]
    pose, state = ep.start, RewardState()
    for t, a in enumerate(ep.actions, 1):
        action = Action(a)
        pose, event = step(world, pose, action)
        visible = visible_classes(world, pose)
        r, state = semantic_reward(state, action, ep.target, visible, split, table, reward_cfg, training=False)
        frames.append(
            f"step {t}: {action.name} -> ({pose.x},{pose.y}) heading={pose.heading} tilt={pose.tilt} "
            f"[{event.name}] reward={r:g}\nvisible: {', '.join(sorted(visible)) or '-'}\n{render(world, pose, goal)}"
        )
    return frames


def cmd_replay(args) -> int:
    frames = replay_frames(Path(args.episode_log), args.index)
    print("\n\n".join(frames))
    return EXIT_OK


# ---------------------------------------------------------------- argparse


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="ssnav",
        description="Semantic-similarity object navigation in synthetic grid worlds.",
        epilog=f"Environment: {ENV_OUT_DIR} overrides out_dir, {ENV_THREADS} overrides train.n_workers. "
        "Exit codes: 0 ok, 2 config error, 3 runtime error.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(name: str, help_text: str) -> argparse.ArgumentParser:
        sp = sub.add_parser(name, help=help_text, description=help_text)
        sp.add_argument("config", help=f"run config file (first line '{CONFIG_HEADER}')")
        sp.add_argument("--out-dir", help=f"output directory (overrides config and {ENV_OUT_DIR})")
        sp.add_argument("--threads", type=int, help=f"training workers (overrides config and {ENV_THREADS})")
        return sp

    with_config("gen-embeddings", "synthesize clustered class embeddings into OUT/embeddings.txt")
    sp = with_config("gen-worlds", "generate world files and a train/test manifest")
    sp.add_argument("--count", type=int, help="total worlds (default: n_train_worlds + n_test_worlds)")
    sp.add_argument("--n-test", type=int, help="how many of them form the test pool (default: n_test_worlds, or count // 3 with --count)")
    with_config("train", "train a policy on the manifest's train pool")
    sp = with_config("eval", "evaluate a checkpoint and write report.txt, report.csv, episodes.csv")
    sp.add_argument("--checkpoint", help="checkpoint file (default: OUT/checkpoint.ckpt)")
    sp.add_argument("--manifest", help="world manifest (default: OUT/manifest.txt)")
    sp.add_argument("--pool", choices=("test", "train"), default="test", help="world pool to evaluate on (default: test)")
    sp.add_argument("--mode", choices=("greedy", "sample"), help="action selection (default: eval.mode)")
    sp.add_argument("--kind", choices=("ssnet", "zs_baseline"), help="refuse checkpoints of any other model kind")
    sp.add_argument("--random", action="store_true", help="evaluate the uniform Random baseline instead of a checkpoint")
    sp.add_argument("--name", help="subdirectory of OUT for the reports (default: eval)")
    sp = with_config("ablate", "train and evaluate the full model against ablated variants")
    sp.add_argument("--no-self-attention", action="store_true", help="add a variant without the attention layer")
    sp.add_argument("--no-partial-reward", action="store_true", help="add a variant with the terminal-only reward")
    sp = sub.add_parser("replay", help="render one logged episode step by step", description="render one logged episode step by step")
    sp.add_argument("episode_log", help="episodes.csv written by eval or ablate")
    sp.add_argument("index", type=int, help="episode index within the log")
    return p


COMMANDS = {
    "gen-embeddings": cmd_gen_embeddings,
    "gen-worlds": cmd_gen_worlds,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "replay":
            return cmd_replay(args)
        cfg = load_config(args.config, args.out_dir, args.threads)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"ssnav: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RunError, EmbeddingError, WorldError, CheckpointError, OSError, ValueError) as exc:
        print(f"ssnav: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
