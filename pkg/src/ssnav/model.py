"""Navigation policies: SSNet, its no-attention ablation, ZS-Baseline, Random.

All learned policies share one interface:

* ``encode(world, pose, target)`` builds the per-step observation array;
* ``step(obs, hidden)`` runs one gradient-free forward pass;
* ``unroll(observations)`` replays a whole episode with gradients, returning
  ``(logits[T, 6], values[T])`` tensors for the loss.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .semantic import ClassSplit, EmbeddingTable, similarity_column
from .world import HEADINGS, Action, GridWorld, Pose, detection_matrix, visible_objects

N_ACTIONS = len(Action)
N_FEATURES = 5  # v, x_c, y_c, area, CS
WINDOW = 7


class CheckpointMismatch(ValueError):
    pass


@dataclass
class PolicyOutput:
    logits: np.ndarray
    value: float
    hidden: tuple


def _zero_hidden(size: int) -> tuple[T.Tensor, T.Tensor]:
    return T.Tensor(np.zeros((1, size))), T.Tensor(np.zeros((1, size)))


def _lstm_unroll(params: T.ParamStore, xs: T.Tensor, hidden) -> tuple[T.Tensor, tuple]:
    """Run the LSTM over the rows of ``xs`` (T x input); returns stacked h and last (h, c)."""
    lstm = {"wx": params["lstm.wx"], "wh": params["lstm.wh"], "b": params["lstm.b"]}
    h, c = hidden
    # the input projection does not depend on the recurrence, so batch it
    zx = xs @ lstm["wx"] + lstm["b"]
    H = lstm["wh"].shape[0]
    hs = []
    for t in range(xs.shape[0]):
        z = zx[t : t + 1] + h @ lstm["wh"]
        i = T.sigmoid(z[:, 0:H])
        f = T.sigmoid(z[:, H : 2 * H])
        g = T.tanh(z[:, 2 * H : 3 * H])
        o = T.sigmoid(z[:, 3 * H :])
        c = f * c + i * g
        h = o * T.tanh(c)
        hs.append(h)
    return T.concat(hs, axis=0), (h, c)


def _heads(params: T.ParamStore, hs: T.Tensor) -> tuple[T.Tensor, T.Tensor]:
    logits = hs @ params["actor.w"] + params["actor.b"]
    values = hs @ params["critic.w"] + params["critic.b"]
    return logits, T.reshape(values, (hs.shape[0],))


def _add_lstm_and_heads(store: T.ParamStore, rng: np.random.Generator, n_input: int, hidden: int) -> None:
    fan = n_input + hidden
    store.add("lstm.wx", T.init_uniform(rng, (n_input, 4 * hidden), fan))
    store.add("lstm.wh", T.init_uniform(rng, (hidden, 4 * hidden), fan))
    store.add("lstm.b", T.init_uniform(rng, (4 * hidden,), fan))
    store.add("actor.w", T.init_uniform(rng, (hidden, N_ACTIONS), hidden))
    store.add("actor.b", T.init_uniform(rng, (N_ACTIONS,), hidden))
    store.add("critic.w", T.init_uniform(rng, (hidden, 1), hidden))
    store.add("critic.b", T.init_uniform(rng, (1,), hidden))


class _Recurrent:
    kind = "abstract"
    hidden_size: int
    params: T.ParamStore

    def initial_hidden(self) -> tuple:
        return _zero_hidden(self.hidden_size)

    def _lstm_input(self, obs: T.Tensor) -> T.Tensor:
        raise NotImplementedError

    def forward(self, observations, hidden=None) -> tuple[T.Tensor, T.Tensor, tuple]:
        obs = T.Tensor(np.stack([np.asarray(o, dtype=np.float64) for o in observations]))
        hidden = self.initial_hidden() if hidden is None else hidden
        xs = self._lstm_input(obs)
        hs, last = _lstm_unroll(self.params, xs, hidden)
        logits, values = _heads(self.params, hs)
        return logits, values, last

    def step(self, obs: np.ndarray, hidden=None) -> PolicyOutput:
        with T.no_grad():
            logits, values, last = self.forward([obs], hidden)
        return PolicyOutput(logits.data[0].copy(), float(values.data[0]), last)

    def unroll(self, observations, hidden=None) -> tuple[T.Tensor, T.Tensor]:
        logits, values, _ = self.forward(observations, hidden)
        return logits, values


# ---------------------------------------------------------------- SSNet


@dataclass(frozen=True)
class SSNetConfig:
    n_rows: int
    d_in: int = 16
    d_k: int = 16
    d_out: int = 16
    hidden: int = 64
    use_attention: bool = True


def init_ssnet_params(cfg: SSNetConfig, seed: int) -> T.ParamStore:
    rng = np.random.default_rng(seed)
    store = T.ParamStore()
    store.add("embed.w", T.init_uniform(rng, (N_FEATURES, cfg.d_in), N_FEATURES))
    store.add("embed.b", T.init_uniform(rng, (cfg.d_in,), N_FEATURES))
    if cfg.use_attention:
        for name in ("wq", "wk", "wv"):
            store.add(f"attn.{name}", T.init_uniform(rng, (cfg.d_in, cfg.d_k), cfg.d_in))
        store.add("attn.wo", T.init_uniform(rng, (cfg.d_k, cfg.d_out), cfg.d_k))
    else:
        store.add("row.w", T.init_uniform(rng, (cfg.d_in, cfg.d_out), cfg.d_in))
        store.add("row.b", T.init_uniform(rng, (cfg.d_out,), cfg.d_in))
    _add_lstm_and_heads(store, rng, cfg.n_rows * cfg.d_out, cfg.hidden)
    return store


def ssnet_row_features(params: T.ParamStore, x: T.Tensor, use_attention: bool = True) -> T.Tensor:
    """Per-row embedding followed by attention (or a per-row linear map); ``(..., rows, d_out)``."""
    emb = x @ params["embed.w"] + params["embed.b"]
    if use_attention:
        attn = {k: params[f"attn.{k}"] for k in ("wq", "wk", "wv", "wo")}
        return T.self_attention(emb, attn)
    return emb @ params["row.w"] + params["row.b"]


class SSNetPolicy(_Recurrent):
    """Detection matrix + similarity column -> attention over rows -> LSTM -> actor/critic."""

    kind = "ssnet"

    def __init__(self, params: T.ParamStore, cfg: SSNetConfig, split: ClassSplit, table: EmbeddingTable):
        if cfg.n_rows != len(split.model_classes):
            raise CheckpointMismatch(
                f"model has {cfg.n_rows} rows but the split has {len(split.model_classes)} model classes"
            )
        self.params = params
        self.cfg = cfg
        self.split = split
        self.table = table
        self.hidden_size = cfg.hidden
        self._cs: dict[str, np.ndarray] = {}

    @classmethod
    def create(cls, split: ClassSplit, table: EmbeddingTable, seed: int, **widths) -> "SSNetPolicy":
        cfg = SSNetConfig(n_rows=len(split.model_classes), **widths)
        return cls(init_ssnet_params(cfg, seed), cfg, split, table)

    def with_params(self, params: T.ParamStore) -> "SSNetPolicy":
        return SSNetPolicy(params, self.cfg, self.split, self.table)

    def similarity(self, target: str) -> np.ndarray:
        col = self._cs.get(target)
        if col is None:
            col = self._cs[target] = similarity_column(self.table, self.split, target)
        return col

    def encode(self, world: GridWorld, pose: Pose, target: str) -> np.ndarray:
        det = detection_matrix(world, pose, self.split)
        return np.concatenate([det, self.similarity(target)[:, None]], axis=1)

    def _lstm_input(self, obs: T.Tensor) -> T.Tensor:
        feats = ssnet_row_features(self.params, obs, self.cfg.use_attention)
        return T.reshape(feats, (obs.shape[0], self.cfg.n_rows * self.cfg.d_out))

    def row_features(self, obs: np.ndarray) -> np.ndarray:
        with T.no_grad():
            return ssnet_row_features(self.params, T.Tensor(obs), self.cfg.use_attention).data

    def meta(self) -> dict:
        return {"kind": self.kind, **asdict(self.cfg), "model_classes": list(self.split.model_classes)}


def ssnet_forward(params: T.ParamStore, inp: np.ndarray, hidden, cfg: SSNetConfig) -> PolicyOutput:
    """Single-step SSNet forward on an ``(n + k) x 5`` input matrix."""
    inp = np.asarray(inp, dtype=np.float64)
    if inp.shape != (cfg.n_rows, N_FEATURES):
        raise T.ShapeError(f"expected input of shape {(cfg.n_rows, N_FEATURES)}, got {inp.shape}")
    x = T.Tensor(inp[None])
    feats = ssnet_row_features(params, x, cfg.use_attention)
    flat = T.reshape(feats, (1, cfg.n_rows * cfg.d_out))
    hidden = _zero_hidden(cfg.hidden) if hidden is None else hidden
    hs, last = _lstm_unroll(params, flat, hidden)
    logits, values = _heads(params, hs)
    return PolicyOutput(logits.data[0].copy(), float(values.data[0]), last)


def make_ablated_ssnet(policy: SSNetPolicy, disable_attention: bool, seed: int = 0) -> SSNetPolicy:
    """Same policy with attention swapped for a per-row linear map of equal width.

    Shared parameters (embedding, LSTM, heads) are copied; the replacement
    row map is freshly initialized from ``seed``.
    """
    if not disable_attention:
        return policy.with_params(policy.params.snapshot())
    cfg = replace(policy.cfg, use_attention=False)
    fresh = init_ssnet_params(cfg, seed)
    src = policy.params
    for name in fresh:
        if name in src:
            fresh[name].data = src[name].data.copy()
    return SSNetPolicy(fresh, cfg, policy.split, policy.table)


# ---------------------------------------------------------------- ZS-Baseline


def egocentric_view(world: GridWorld, pose: Pose, split: ClassSplit) -> np.ndarray:
    """7x7 window ahead of the agent with one one-hot layer per model class.

    Rows index distance ahead (0..6), columns lateral offset (-3..3, right
    positive). Only currently visible objects are drawn; walls are not, so
    this policy gets no obstacle signal the detection matrix lacks.
    """
    classes = {name: i for i, name in enumerate(split.model_classes)}
    view = np.zeros((WINDOW, WINDOW, len(classes)))
    hx, hy = HEADINGS[pose.heading]
    norm = float(np.hypot(hx, hy))
    fx, fy = hx / norm, hy / norm
    rx, ry = fy, -fx
    half = WINDOW // 2
    for obj, _ in visible_objects(world, pose):
        i = classes.get(obj.class_name)
        if i is None:
            continue
        dx, dy = obj.x - pose.x, obj.y - pose.y
        f = int(round(dx * fx + dy * fy))
        r = int(round(dx * rx + dy * ry))
        if 0 <= f < WINDOW and -half <= r <= half:
            view[f, r + half, i] = 1.0
    return view.reshape(-1)


@dataclass(frozen=True)
class ZSBaselineConfig:
    n_rows: int
    embed_dim: int
    feature: int = 64
    hidden: int = 64

    @property
    def visual_size(self) -> int:
        return WINDOW * WINDOW * self.n_rows


def init_zs_params(cfg: ZSBaselineConfig, seed: int) -> T.ParamStore:
    rng = np.random.default_rng(seed)
    store = T.ParamStore()
    store.add("visual.w", T.init_uniform(rng, (cfg.visual_size, cfg.feature), cfg.visual_size))
    store.add("visual.b", T.init_uniform(rng, (cfg.feature,), cfg.visual_size))
    _add_lstm_and_heads(store, rng, cfg.feature + cfg.embed_dim, cfg.hidden)
    return store


class ZSBaselinePolicy(_Recurrent):
    """Visual feature concatenated with the raw target embedding -> LSTM -> actor/critic."""

    kind = "zs_baseline"

    def __init__(self, params: T.ParamStore, cfg: ZSBaselineConfig, split: ClassSplit, table: EmbeddingTable):
        if cfg.n_rows != len(split.model_classes):
            raise CheckpointMismatch(
                f"model has {cfg.n_rows} rows but the split has {len(split.model_classes)} model classes"
            )
        if cfg.embed_dim != table.dim:
            raise CheckpointMismatch(f"model expects {cfg.embed_dim}-d embeddings, table has {table.dim}")
        self.params = params
        self.cfg = cfg
        self.split = split
        self.table = table
        self.hidden_size = cfg.hidden

    @classmethod
    def create(cls, split: ClassSplit, table: EmbeddingTable, seed: int, **widths) -> "ZSBaselinePolicy":
        cfg = ZSBaselineConfig(n_rows=len(split.model_classes), embed_dim=table.dim, **widths)
        return cls(init_zs_params(cfg, seed), cfg, split, table)

    def with_params(self, params: T.ParamStore) -> "ZSBaselinePolicy":
        return ZSBaselinePolicy(params, self.cfg, self.split, self.table)

    def encode(self, world: GridWorld, pose: Pose, target: str) -> np.ndarray:
        return np.concatenate([egocentric_view(world, pose, self.split), self.table[target]])

    def _lstm_input(self, obs: T.Tensor) -> T.Tensor:
        n = self.cfg.visual_size
        visual, emb = obs[:, :n], obs[:, n:]
        feat = visual @ self.params["visual.w"] + self.params["visual.b"]
        return T.concat([feat, emb], axis=1)

    def meta(self) -> dict:
        return {"kind": self.kind, **asdict(self.cfg), "model_classes": list(self.split.model_classes)}


def zs_baseline_forward(params: T.ParamStore, visual_feature, target_embedding, hidden, cfg: ZSBaselineConfig) -> PolicyOutput:
    visual_feature = np.asarray(visual_feature, dtype=np.float64)
    target_embedding = np.asarray(target_embedding, dtype=np.float64)
    if visual_feature.shape != (cfg.visual_size,) or target_embedding.shape != (cfg.embed_dim,):
        raise T.ShapeError("visual feature or target embedding has the wrong length")
    feat = T.Tensor(visual_feature[None]) @ params["visual.w"] + params["visual.b"]
    x = T.concat([feat, T.Tensor(target_embedding[None])], axis=1)
    hidden = _zero_hidden(cfg.hidden) if hidden is None else hidden
    hs, last = _lstm_unroll(params, x, hidden)
    logits, values = _heads(params, hs)
    return PolicyOutput(logits.data[0].copy(), float(values.data[0]), last)


# ---------------------------------------------------------------- Random


class RandomPolicy:
    """Uniform over the six actions regardless of observation."""

    kind = "random"
    params = None

    def initial_hidden(self):
        return ()

    def encode(self, world, pose, target):
        return None

    def step(self, obs=None, hidden=None) -> PolicyOutput:
        return random_policy()

    def meta(self) -> dict:
        return {"kind": self.kind}


def random_policy() -> PolicyOutput:
    return PolicyOutput(np.zeros(N_ACTIONS), 0.0, ())


# ---------------------------------------------------------------- acting


def action_probs(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


def act(output: PolicyOutput, mode: str = "sample", rng: np.random.Generator | None = None) -> Action:
    if mode == "greedy":
        return Action(int(np.argmax(output.logits)))
    if mode != "sample":
        raise ValueError(f"unknown action mode {mode!r}")
    if rng is None:
        raise ValueError("sampling needs an rng")
    cdf = np.cumsum(action_probs(output.logits))
    i = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return Action(min(i, N_ACTIONS - 1))


# ---------------------------------------------------------------- persistence


def save_policy(path: str | Path, policy, optimizer=None, extra: dict | None = None) -> None:
    meta = policy.meta()
    meta.update(extra or {})
    T.save_checkpoint(path, policy.params, optimizer, meta)


def load_policy(path: str | Path, split: ClassSplit, table: EmbeddingTable, kind: str | None = None):
    """Rebuild a policy from a checkpoint; returns ``(policy, optimizer, meta)``."""
    store, optimizer, meta = T.load_checkpoint(path)
    if kind is not None and meta.get("kind") != kind:
        raise CheckpointMismatch(f"checkpoint holds a {meta.get('kind')!r} model, expected {kind!r}")
    if meta.get("model_classes") not in (None, list(split.model_classes)):
        raise CheckpointMismatch("checkpoint class rows differ from the split's model classes")
    if meta["kind"] == "ssnet":
        cfg = SSNetConfig(
            n_rows=meta["n_rows"], d_in=meta["d_in"], d_k=meta["d_k"], d_out=meta["d_out"],
            hidden=meta["hidden"], use_attention=meta["use_attention"],
        )
        policy = SSNetPolicy(store, cfg, split, table)
    elif meta["kind"] == "zs_baseline":
        cfg = ZSBaselineConfig(n_rows=meta["n_rows"], embed_dim=meta["embed_dim"], feature=meta["feature"], hidden=meta["hidden"])
        policy = ZSBaselinePolicy(store, cfg, split, table)
    else:
        raise CheckpointMismatch(f"unknown model kind {meta['kind']!r}")
    return policy, optimizer, meta
