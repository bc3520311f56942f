"""The desk-scale zero-shot benchmark used by the scripts and the acceptance suite."""

from __future__ import annotations

from dataclasses import dataclass, field

from .evaluation import EpisodeResult, MetricsReport, report, run_eval
from .model import RandomPolicy
from .reward import RewardConfig
from .semantic import ClassSplit, EmbeddingTable, synth_embeddings
from .training import TrainConfig, TrainResult, train, world_pool
from .world import GridWorld, WorldSpec

# cluster id -> (seen, unseen, irrelevant)
HOUSEHOLD = {
    0: (("mug", "cup", "kettle"), ("teapot",), ("sink",)),
    1: (("pillow", "blanket", "bed"), ("quilt",), ("lamp",)),
    2: (("towel", "soap"), ("toothbrush",), ("mirror",)),
    3: (("sofa", "television"), ("remote",), ("rug",)),
}

# Denser, mostly mid-height objects and fewer walls than WorldSpec's defaults.
# A greedy policy has no collision signal and loops whenever its view is empty,
# so sparse rooms measure decoding loops more than navigation.
BENCHMARK_SPEC = WorldSpec(
    width=10, height=10, wall_density=0.05, objects_per_class=(2, 3), co_location_bias=0.6, band_weights=(0.1, 0.8, 0.1)
)
# Training recipe shared by every arm; about 4 minutes per SSNet run on one core.
BENCHMARK_TRAIN = dict(episodes_total=20_000, lr=1e-3, entropy_weight=0.001)
EVAL_SEED = 1


@dataclass
class Benchmark:
    split: ClassSplit
    table: EmbeddingTable
    spec: WorldSpec
    world_seed: int
    train_worlds: list = field(default_factory=list)
    test_worlds: list = field(default_factory=list)


def household_split() -> tuple[ClassSplit, list[str], list[int]]:
    seen, unseen, irrelevant, clusters = [], [], [], {}
    for cid, (s, u, i) in HOUSEHOLD.items():
        seen += s
        unseen += u
        irrelevant += i
        for name in s + u + i:
            clusters[name] = cid
    split = ClassSplit(tuple(seen), tuple(unseen), tuple(irrelevant))
    names = list(split.all_classes)
    return split, names, [clusters[n] for n in names]


def zero_shot_benchmark(
    world_seed: int = 2024,
    embed_seed: int = 7,
    dim: int = 32,
    n_train: int = 8,
    n_test: int = 4,
    spec: WorldSpec | None = None,
) -> Benchmark:
    split, names, clusters = household_split()
    table = synth_embeddings(embed_seed, names, dim, clusters)
    spec = spec or BENCHMARK_SPEC
    train_worlds, test_worlds = world_pool(world_seed, n_train, n_test, spec, split, table)
    return Benchmark(split, table, spec, world_seed, train_worlds, test_worlds)


def describe(world: GridWorld) -> str:
    return f"world seed={world.seed} objects={len(world.objects)} walls={len(world.walls)}"


@dataclass(frozen=True)
class Arm:
    """One trainable policy variant of the benchmark."""

    name: str
    model: str = "ssnet"
    use_attention: bool = True
    partial_reward: bool = True


ARMS = {
    "ssnet": Arm("ssnet"),
    "zs_baseline": Arm("zs_baseline", model="zs_baseline"),
    "no_sa": Arm("no_sa", use_attention=False),
    "no_pr": Arm("no_pr", partial_reward=False),
}


def arm_config(bench: Benchmark, arm: Arm, seed: int, **overrides) -> TrainConfig:
    kwargs = dict(
        BENCHMARK_TRAIN,
        seed=seed,
        world_seed=bench.world_seed,
        world_spec=bench.spec,
        train_worlds=bench.train_worlds,
        model=arm.model,
        use_attention=arm.use_attention,
        reward=RewardConfig(partial_reward_enabled=arm.partial_reward),
        log_every=1000,
    )
    kwargs.update(overrides)
    return TrainConfig(bench.split, bench.table, **kwargs)


@dataclass
class ArmRun:
    arm: str
    seed: int
    report: MetricsReport
    results: list[EpisodeResult]
    training: TrainResult | None = None

    def sr(self, group: str, threshold: int = 1) -> float:
        cell = self.report[group, threshold]
        return float("nan") if cell is None else cell.sr


def run_arm(bench: Benchmark, arm: Arm | str, seed: int, n_eval: int = 250, on_log=None, **overrides) -> ArmRun:
    """Train one arm from scratch and evaluate it greedily on the test worlds."""
    arm = ARMS[arm] if isinstance(arm, str) else arm
    result = train(arm_config(bench, arm, seed, **overrides), on_log=on_log)
    results = run_eval(result.policy, bench.split, bench.test_worlds, n_eval, EVAL_SEED, mode="greedy")
    return ArmRun(arm.name, seed, report(results, bench.split), results, result)


def run_random(bench: Benchmark, n_eval: int = 250) -> ArmRun:
    """The uniform policy; it is evaluated by sampling since its argmax is always action 0."""
    results = run_eval(RandomPolicy(), bench.split, bench.test_worlds, n_eval, EVAL_SEED, mode="sample")
    return ArmRun("random", 0, report(results, bench.split), results)
