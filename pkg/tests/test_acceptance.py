"""Acceptance gate. Each test reports one PASS/FAIL line through ``conftest.record``.

The zero-shot and ablation criteria train real policies and take a while
(see README for timings); everything else runs in seconds.
"""

import functools
import itertools
import math
import time

import mpmath
import numpy as np
import pytest

from ssnav import cli
from ssnav import tensor as T
from ssnav.evaluation import EpisodeResult, bucket, report, spl, success_rate
from ssnav.experiment import BENCHMARK_TRAIN, HOUSEHOLD, run_arm, run_random, zero_shot_benchmark
from ssnav.model import SSNetPolicy
from ssnav.reward import RewardConfig, RewardState, semantic_reward
from ssnav.semantic import ClassSplit, EmbeddingTable, cosine_similarity
from ssnav.training import advantages_of, compute_losses, make_reward_fn, rollout, sample_start
from ssnav.world import (
    MOVE_ACTIONS,
    Action,
    StepEvent,
    Unreachable,
    WorldSpec,
    gen_world,
    shortest_path_length,
    step,
    success_check,
)

from conftest import record
from oracles import algorithm1, spl_oracle, sr_oracle


# ---------------------------------------------------------------- 1. cosine


def extended_cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise cosine in 80-bit extended precision."""
    a = a.astype(np.longdouble)
    b = b.astype(np.longdouble)
    return (a * b).sum(1) / (np.sqrt((a * a).sum(1)) * np.sqrt((b * b).sum(1)))


def mp_cosine(a, b) -> float:
    with mpmath.workdps(50):
        x = [mpmath.mpf(float(v)) for v in a]
        y = [mpmath.mpf(float(v)) for v in b]
        dot = mpmath.fsum(p * q for p, q in zip(x, y))
        return float(dot / (mpmath.sqrt(mpmath.fsum(p * p for p in x)) * mpmath.sqrt(mpmath.fsum(q * q for q in y))))


def test_criterion_1_cosine():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = 0.0
    worst_mp = 0.0
    n_pairs = 0
    props_ok = True
    for dim in (2, 3, 8, 32, 50, 300):
        n = 100_000 // 6 + (dim == 2) * (100_000 % 6)
        scale = 10.0 ** rng.uniform(-3, 3, (n, 1))
        a = rng.standard_normal((n, dim)) * scale
        b = rng.standard_normal((n, dim)) * 10.0 ** rng.uniform(-3, 3, (n, 1))
        ours = np.array([cosine_similarity(x, y) for x, y in zip(a, b)])
        ref = extended_cosine(a, b)
        worst = max(worst, float(np.max(np.abs(ours - ref))))
        n_pairs += n
        # anchor the extended-precision oracle with 50-digit arithmetic on a subsample
        for i in range(0, n, n // 60):
            worst_mp = max(worst_mp, abs(mp_cosine(a[i], b[i]) - float(ref[i])), abs(ours[i] - mp_cosine(a[i], b[i])))
        # symmetry exact; positive scaling invariant to rounding; range [-1, 1]
        for i in range(0, n, n // 200):
            s, r = float(rng.uniform(1e-3, 1e3)), float(rng.uniform(1e-3, 1e3))
            props_ok &= cosine_similarity(a[i], b[i]) == cosine_similarity(b[i], a[i])
            props_ok &= abs(cosine_similarity(s * a[i], r * b[i]) - ours[i]) <= 1e-12
            props_ok &= -1.0 <= ours[i] <= 1.0
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-9 and worst_mp <= 1e-9 and props_ok and n_pairs == 100_000 and elapsed < 5.0
    record(1, ok, f"{n_pairs} pairs, max |diff| {worst:.2e} (mpmath anchor {worst_mp:.2e}), properties {props_ok}, {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- 2. Algorithm 1


# integer vectors whose cosine with e1 is exactly the grid value (norms are perfect squares)
EXACT_COS = {
    0.0: [0, 1],
    0.25: [1] * 16,
    0.5: [1, 1, 1, 1],
    0.75: [3] + [1] * 7,
    1.0: [1],
}


def exact_vector(cs: float, dim: int = 16) -> np.ndarray:
    v = np.zeros(dim)
    base = EXACT_COS[cs]
    v[: len(base)] = base
    return v


def test_criterion_2_algorithm_one():
    t0 = time.perf_counter()
    grid = (0.0, 0.25, 0.5, 0.75, 1.0)
    others = ("s1", "s2", "i1", "i2")
    split = ClassSplit(("t", "s1", "s2"), ("u",), ("i1", "i2"))
    names = {a: "Done" if a is Action.DONE else a.name for a in Action}

    def cosine(x, y):
        dot = sum(p * q for p, q in zip(x, y))
        return dot / (math.sqrt(sum(p * p for p in x)) * math.sqrt(sum(q * q for q in y)))

    scenarios = mismatches = 0
    for k in range(len(others) + 1):
        for visible_others in itertools.combinations(others, k):
            for cs_values in itertools.product(grid, repeat=k):
                entries = {name: exact_vector(0.5) for name in others}
                entries.update({name: exact_vector(cs) for name, cs in zip(visible_others, cs_values)})
                entries["t"] = exact_vector(1.0)
                entries["u"] = exact_vector(0.75)
                table = EmbeddingTable(16, entries)
                vecs = {n: list(table[n]) for n in table.classes}
                cache = {}

                def oracle_cs(a, b):
                    if (a, b) not in cache:
                        cache[a, b] = cosine(vecs[a], vecs[b])
                    return cache[a, b]

                for cs_max, action, target_visible, unseen_visible in itertools.product(grid, Action, (False, True), (False, True)):
                    visible = list(visible_others) + ["t"] * target_visible + ["u"] * unseen_visible
                    ours = semantic_reward(RewardState(cs_max), action, "t", visible, split, table)
                    ref = algorithm1(
                        names[action], "t", set(visible), cs_max, split.seen, split.irrelevant,
                        oracle_cs,
                    )
                    scenarios += 1
                    mismatches += (ours[0], ours[1].cs_max) != (float(ref[0]), float(ref[1]))
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and elapsed < 10.0
    record(2, ok, f"{scenarios} scenarios, {mismatches} mismatches, {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- 3. gradients


def gradient_relative_error(analytic: float, numeric: float, noise: float = 0.0, floor: float = 1e-6) -> float:
    """|a - n| / (|a| + |n|), after discounting ``noise``, the rounding bound of the difference quotient."""
    return max(0.0, abs(analytic - numeric) - noise) / max(floor, abs(analytic) + abs(numeric))


def quotient_noise(f_plus: float, f_minus: float, h: float) -> float:
    # each loss value is rounded to within eps * |f|; the quotient divides their sum by 2h
    return np.finfo(float).eps * (abs(f_plus) + abs(f_minus)) / (2 * h)


def test_criterion_3_full_loss_gradients():
    t0 = time.perf_counter()
    bench = zero_shot_benchmark()
    h = 1e-5
    worst = worst_raw = 0.0
    checks = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        policy = SSNetPolicy.create(bench.split, bench.table, seed=seed)
        world = bench.train_worlds[seed % len(bench.train_worlds)]
        target = sorted(c for c in world.classes() if c in bench.split.seen)[seed % 3]
        reward_fn = make_reward_fn(bench.split, bench.table, RewardConfig())
        traj = rollout(world, sample_start(world, rng), target, policy, reward_fn, 8, rng)
        params = policy.params
        # the advantage is a constant of the loss, so it stays pinned while parameters move
        frozen = advantages_of(traj, policy, 0.99)

        def loss() -> float:
            with T.no_grad():
                return float(compute_losses(traj, policy, 0.99, 0.01, 0.5, frozen).data)

        params.zero_grad()
        T.backward(compute_losses(traj, policy, 0.99, 0.01, 0.5))
        grads = {n: g.copy() for n, g in params.grads().items()}

        # one random direction through every parameter at once
        direction = {n: rng.standard_normal(params[n].shape) for n in params.names()}
        base = {n: params[n].data.copy() for n in params.names()}
        f = {}
        for sign in (1, -1):
            for n in params.names():
                params[n].data = base[n] + sign * h * direction[n]
            f[sign] = loss()
        for n in params.names():
            params[n].data = base[n]
        numeric = (f[1] - f[-1]) / (2 * h)
        analytic = sum(float(np.vdot(grads[n], direction[n])) for n in params.names())
        worst = max(worst, gradient_relative_error(analytic, numeric, quotient_noise(f[1], f[-1], h)))
        worst_raw = max(worst_raw, gradient_relative_error(analytic, numeric))
        checks += 1

        # two random coordinates of every parameter tensor
        for n in params.names():
            data = params[n].data
            for _ in range(2):
                idx = tuple(int(rng.integers(s)) for s in data.shape)
                old = data[idx]
                data[idx] = old + h
                fp = loss()
                data[idx] = old - h
                fm = loss()
                data[idx] = old
                a, num = float(grads[n][idx]), (fp - fm) / (2 * h)
                worst = max(worst, gradient_relative_error(a, num, quotient_noise(fp, fm, h)))
                worst_raw = max(worst_raw, gradient_relative_error(a, num))
                checks += 1
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-4 and elapsed < 120
    record(
        3,
        ok,
        f"100 seeds, {checks} checks, max relative error {worst:.2e} beyond rounding "
        f"({worst_raw:.2e} without the rounding allowance), {elapsed:.1f}s",
    )
    assert ok


# ---------------------------------------------------------------- 4. metrics


def test_criterion_4_metrics():
    t0 = time.perf_counter()
    fixtures_ok = (
        success_rate([EpisodeResult(True, 1, 1, "a", "seen"), EpisodeResult(False, 1, 1, "a", "seen")]) == 50.0
        and success_rate([EpisodeResult(False, 3, 1, "a", "seen")] * 2) == 0.0
        and success_rate([EpisodeResult(True, 1, 1, "a", "seen")] * 3 + [EpisodeResult(False, 1, 1, "a", "seen")]) == 75.0
        and spl([EpisodeResult(True, 8, 4, "a", "seen")]) == 50.0
        and spl([EpisodeResult(True, 4, 4, "a", "seen")]) == 100.0
        and spl([EpisodeResult(False, 9, 4, "a", "seen")]) == 0.0
    )
    rep = report(
        [
            EpisodeResult(True, 2, 2, "a", "seen"),
            EpisodeResult(False, 5, 2, "a", "seen"),
            EpisodeResult(True, 12, 6, "u", "unseen"),
            EpisodeResult(False, 50, 3, "u", "unseen"),
        ]
    )
    fixtures_ok &= (rep["seen", 1].sr, rep["seen", 1].spl, rep["unseen", 1].sr, rep["unseen", 1].spl) == (50, 50, 50, 25)
    fixtures_ok &= (rep["unseen", 5].sr, rep["unseen", 5].spl, rep["unseen", 5].n) == (100, 50, 1)
    fixtures_ok &= report([EpisodeResult(True, 2, 2, "a", "seen")])["unseen", 1] is None

    rng = np.random.default_rng(4)
    spl_ok = oracle_ok = bucket_ok = True
    for _ in range(1000):
        n = int(rng.integers(1, 40))
        items = []
        for _ in range(n):
            s = bool(rng.random() < 0.5)
            l = int(rng.integers(0, 20))
            e = int(rng.integers(l, 60)) if s else int(rng.integers(0, 60))
            items.append((s, l, e))
        results = [EpisodeResult(s, e, l, "a", "seen") for s, l, e in items]
        spl_ok &= spl(results) <= success_rate(results)
        oracle_ok &= abs(spl(results) - spl_oracle(items)) <= 1e-12 and abs(success_rate(results) - sr_oracle(items)) <= 1e-12
        manual = [r for r in results if r.optimal_length >= 5]
        bucket_ok &= bucket(results, 5) == manual
        if manual:
            bucket_ok &= success_rate(bucket(results, 5)) == 100.0 * sum(r.success for r in manual) / len(manual)
    elapsed = time.perf_counter() - t0
    ok = fixtures_ok and spl_ok and oracle_ok and bucket_ok and elapsed < 5
    record(4, ok, f"fixtures {fixtures_ok}, SPL<=SR {spl_ok}, oracle {oracle_ok}, buckets {bucket_ok}, {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- 5. shortest paths


def brute_force_lengths(world, start, targets, max_depth: int) -> dict:
    """Enumerate every sequence of non-Done actions up to ``max_depth``.

    All 5^d sequences of depth d are kept as an array of pose indices and
    advanced through a one-step transition table, so nothing is pruned.
    """
    poses = list(world.poses())
    index = {p: i for i, p in enumerate(poses)}
    table = np.array([[index[step(world, p, a)[0]] for a in MOVE_ACTIONS] for p in poses])
    goal = {t: np.array([success_check(world, p, t) for p in poses]) for t in targets}
    found = {}
    frontier = np.array([index[start]])
    for depth in range(max_depth + 1):
        for t in targets:
            if t not in found and goal[t][frontier].any():
                found[t] = depth
        if depth < max_depth:
            frontier = table[frontier].reshape(-1)
    return found


def test_criterion_5_shortest_paths():
    t0 = time.perf_counter()
    split = ClassSplit(("mug", "cup", "bed", "sofa"), ("teapot",), ("lamp", "rug"))
    spec = WorldSpec(width=8, height=8, wall_density=0.2, band_weights=(0.25, 0.5, 0.25))
    queries = mismatches = within = 0
    for i in range(200):
        world = gen_world(9_000 + i, spec, split)
        rng = np.random.default_rng(i)
        start = sample_start(world, rng)
        targets = sorted(world.classes())
        brute = brute_force_lengths(world, start, targets, 8)
        for t in targets:
            try:
                l = shortest_path_length(world, start, t)
            except Unreachable:
                l = None
            expected = brute.get(t)
            queries += 1
            within += expected is not None
            if l is not None and l <= 8:
                mismatches += l != expected
            else:
                mismatches += expected is not None
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and elapsed < 60
    record(5, ok, f"200 worlds, {queries} queries ({within} within depth 8), {mismatches} mismatches, {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- 6, 7. benchmark

SEEDS = (0, 1, 2)
_RUNS: dict = {}


@functools.cache
def benchmark():
    return zero_shot_benchmark()


def benchmark_run(arm: str, seed: int):
    """Train and greedily evaluate one arm; shared by criteria 6 and 7."""
    if (arm, seed) not in _RUNS:
        t0 = time.perf_counter()
        run = run_arm(benchmark(), arm, seed)
        _RUNS[arm, seed] = (run, time.perf_counter() - t0)
        print(f"  {arm} seed {seed}: seen {run.sr('seen'):.1f} unseen {run.sr('unseen'):.1f} ({_RUNS[arm, seed][1]:.0f}s)")
    return _RUNS[arm, seed]


def mean_sr(arm: str, group: str) -> float:
    return float(np.mean([benchmark_run(arm, s)[0].sr(group) for s in SEEDS]))


def test_criterion_6_benchmark_zero_shot():
    bench = benchmark()
    clusters = {cid: (len(seen), len(unseen)) for cid, (seen, unseen, _) in HOUSEHOLD.items()}
    setup_ok = (
        len(clusters) == 4
        and len(bench.split.seen) == 10
        and len(bench.split.unseen) == 4
        and all(n_seen >= 2 for n_seen, n_unseen in clusters.values() if n_unseen)
        and (bench.spec.width, bench.spec.height, bench.spec.co_location_bias) == (10, 10, 0.6)
        and (len(bench.train_worlds), len(bench.test_worlds)) == (8, 4)
        and BENCHMARK_TRAIN["episodes_total"] <= 50_000
    )
    rand = run_random(bench)
    ssnet = [benchmark_run("ssnet", s) for s in SEEDS]
    zs = [benchmark_run("zs_baseline", s) for s in SEEDS]
    sync_ok = all(r.training.config.n_workers == 1 for r, _ in ssnet + zs)
    slowest = max(dt for _, dt in ssnet + zs)

    seen = mean_sr("ssnet", "seen")
    unseen = mean_sr("ssnet", "unseen")
    a = seen >= 60.0
    b = unseen >= 2 * rand.sr("unseen")
    wins = sum(r.sr("unseen") > z.sr("unseen") for (r, _), (z, _) in zip(ssnet, zs))
    c = wins >= 2
    ok = setup_ok and sync_ok and slowest < 1800 and a and b and c
    per_seed = " ".join(
        f"s{s}:{r.sr('seen'):.1f}/{r.sr('unseen'):.1f} vs zs {z.sr('unseen'):.1f}" for s, (r, _), (z, _) in zip(SEEDS, ssnet, zs)
    )
    record(
        6,
        ok,
        f"(a) seen SR {seen:.1f} >= 60: {a}; (b) unseen SR {unseen:.1f} >= 2 x random {rand.sr('unseen'):.1f}: {b}; "
        f"(c) beats ZS unseen on {wins}/3: {c}; [{per_seed}]; slowest run {slowest:.0f}s",
    )
    assert ok


def test_criterion_7_benchmark_ablation():
    full = mean_sr("ssnet", "seen")
    no_sa = mean_sr("no_sa", "seen")
    no_pr = mean_sr("no_pr", "seen")
    ok = full >= no_sa
    record(
        7,
        ok,
        f"mean seen SR full {full:.1f} >= no-SA {no_sa:.1f}: {ok}; "
        f"PR-off {no_pr:.1f} (unseen: full {mean_sr('ssnet', 'unseen'):.1f}, no-SA {mean_sr('no_sa', 'unseen'):.1f}, "
        f"PR-off {mean_sr('no_pr', 'unseen'):.1f}), reported only",
    )
    assert ok


# ---------------------------------------------------------------- 8. determinism


def test_criterion_8_pipeline_determinism(tmp_path):
    t0 = time.perf_counter()
    config = tmp_path / "run.cfg"
    config.write_text(
        "\n".join(
            [
                cli.CONFIG_HEADER, "seed = 17", f"out_dir = {tmp_path / 'unused'}",
                "train.episodes_total = 1000", "train.log_every = 100", "train.log_wall_time = false",
                "train.lr = 0.001", "eval.n_episodes = 100",
            ]
        )
        + "\n"
    )
    outputs = []
    for run in ("a", "b"):
        out = tmp_path / run
        for command in ("gen-embeddings", "gen-worlds", "train", "eval"):
            assert cli.main([command, str(config), "--out-dir", str(out)]) == 0
        outputs.append(out)
    files = sorted(str(p.relative_to(outputs[0])) for p in outputs[0].rglob("*") if p.is_file())
    differing = [
        f for f in files
        if not f.startswith("config.") and (outputs[0] / f).read_bytes() != (outputs[1] / f).read_bytes()
    ]
    # the config echoes differ only by the output directory they record
    echoes_ok = all(
        (outputs[0] / f).read_text().replace(str(outputs[0]), "OUT") == (outputs[1] / f).read_text().replace(str(outputs[1]), "OUT")
        for f in files
        if f.startswith("config.")
    )
    elapsed = time.perf_counter() - t0
    ok = not differing and echoes_ok and elapsed < 180
    record(8, ok, f"{len(files)} artifacts compared, {len(differing)} differ, echoes {echoes_ok}, {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- 9. equivariance


def test_criterion_9_permutation_equivariance():
    t0 = time.perf_counter()
    rng = np.random.default_rng(9)
    worst = 0.0
    with T.no_grad():
        for _ in range(100):
            n, d_in, d_k, d_out = int(rng.integers(2, 20)), int(rng.integers(1, 17)), int(rng.integers(1, 17)), int(rng.integers(1, 17))
            params = {
                "wq": T.Tensor(rng.standard_normal((d_in, d_k))),
                "wk": T.Tensor(rng.standard_normal((d_in, d_k))),
                "wv": T.Tensor(rng.standard_normal((d_in, d_k))),
                "wo": T.Tensor(rng.standard_normal((d_k, d_out))),
            }
            x = rng.standard_normal((n, d_in))
            perm = rng.permutation(n)
            a = T.self_attention(T.Tensor(x), params).data
            b = T.self_attention(T.Tensor(x[perm]), params).data
            worst = max(worst, float(np.abs(b - a[perm]).max()))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-10 and elapsed < 5
    record(9, ok, f"100 random (X, P), max deviation {worst:.2e}, {elapsed:.2f}s")
    assert ok
