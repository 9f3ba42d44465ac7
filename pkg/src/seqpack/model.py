"""Policy network: a context encoder feeding an action-expert trunk whose
shared feature layer drives both a velocity (flow) head and a sigmoid
completion head, trained by straight-line flow matching plus weighted
binary cross-entropy."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffcore import MlpSpec, ParamSet, glorot_uniform, init_mlp, make_rng, mlp_backward, mlp_forward

BCE_EPS = 1e-12
# Completion probabilities are clipped into the open interval so p is never
# exactly 0 or 1 even at saturated logits.
P_CLIP = 1e-15


@dataclass(frozen=True)
class ObsLayout:
    """Index layout of the raw scene state so the encoder can derive
    relative features (the context order is arm positions, grip-open flags,
    item positions, placed flags, container-closed flag)."""

    n_items: int
    container_position: tuple[float, float]

    @property
    def arm_span(self) -> tuple[int, int]:
        return 0, 4

    @property
    def item_span(self) -> tuple[int, int]:
        return 6, 6 + 2 * self.n_items

    def to_json(self) -> dict:
        return {"n_items": self.n_items, "container_position": list(self.container_position)}

    @staticmethod
    def from_json(doc: dict) -> "ObsLayout":
        return ObsLayout(int(doc["n_items"]), tuple(doc["container_position"]))


def expanded_width(layout: ObsLayout) -> int:
    # item-arm deltas (4k) + container-arm deltas (4) + item-arm distances
    # (2k) + container-arm distances (2)
    return 6 * layout.n_items + 6


def expand_context(layout: ObsLayout, z: np.ndarray) -> np.ndarray:
    """Append relative geometry to the raw context: per-item deltas and
    distances to both grippers, and container deltas/distances. Pure
    encoder preprocessing; datasets and interfaces keep the raw vectors."""
    squeeze = z.ndim == 1
    if squeeze:
        z = z[None, :]
    arms = z[:, 0:4].reshape(-1, 2, 2)
    lo, hi = layout.item_span
    items = z[:, lo:hi].reshape(-1, layout.n_items, 2)
    deltas = items[:, None, :, :] - arms[:, :, None, :]  # (n, arm, item, 2)
    cont = np.asarray(layout.container_position) - arms  # (n, arm, 2)
    dists = np.sqrt((deltas**2).sum(-1))  # (n, arm, item)
    cont_dists = np.sqrt((cont**2).sum(-1))  # (n, arm)
    n = z.shape[0]
    out = np.concatenate(
        [z, deltas.reshape(n, -1), cont.reshape(n, -1), dists.reshape(n, -1), cont_dists],
        axis=1,
    )
    return out[0] if squeeze else out


@dataclass(frozen=True)
class ModelConfig:
    state_dim: int
    prompt_dim: int
    chunk_len: int = 8
    action_dim: int = 6
    embed_dim: int = 64
    feature_dim: int = 64
    encoder_hidden: tuple[int, ...] = (64, 64)
    expert_hidden: tuple[int, ...] = (64, 64)
    # Per-channel affine map from raw simulator actions to the roughly
    # unit-scale space the flow model works in: scaled = (raw - offset) * scale.
    action_offset: tuple[float, ...] = ()
    action_scale: tuple[float, ...] = ()
    obs_layout: ObsLayout | None = None

    def __post_init__(self):
        off = self.action_offset or (0.0,) * self.action_dim
        scale = self.action_scale or (1.0,) * self.action_dim
        if len(off) != self.action_dim or len(scale) != self.action_dim:
            raise ValueError("action_offset/action_scale must have length action_dim")
        object.__setattr__(self, "action_offset", tuple(float(v) for v in off))
        object.__setattr__(self, "action_scale", tuple(float(v) for v in scale))

    @property
    def context_dim(self) -> int:
        return self.state_dim + self.prompt_dim

    @property
    def encoder_input_dim(self) -> int:
        extra = expanded_width(self.obs_layout) if self.obs_layout is not None else 0
        return self.context_dim + extra

    @property
    def chunk_size(self) -> int:
        return self.chunk_len * self.action_dim

    def to_json(self) -> dict:
        return {
            "state_dim": self.state_dim,
            "prompt_dim": self.prompt_dim,
            "chunk_len": self.chunk_len,
            "action_dim": self.action_dim,
            "embed_dim": self.embed_dim,
            "feature_dim": self.feature_dim,
            "encoder_hidden": list(self.encoder_hidden),
            "expert_hidden": list(self.expert_hidden),
            "action_offset": list(self.action_offset),
            "action_scale": list(self.action_scale),
            "obs_layout": None if self.obs_layout is None else self.obs_layout.to_json(),
        }

    @staticmethod
    def from_json(doc: dict) -> "ModelConfig":
        layout = doc.get("obs_layout")
        return ModelConfig(
            state_dim=int(doc["state_dim"]),
            prompt_dim=int(doc["prompt_dim"]),
            chunk_len=int(doc["chunk_len"]),
            action_dim=int(doc["action_dim"]),
            embed_dim=int(doc["embed_dim"]),
            feature_dim=int(doc["feature_dim"]),
            encoder_hidden=tuple(doc["encoder_hidden"]),
            expert_hidden=tuple(doc["expert_hidden"]),
            action_offset=tuple(doc["action_offset"]),
            action_scale=tuple(doc["action_scale"]),
            obs_layout=None if layout is None else ObsLayout.from_json(layout),
        )


@dataclass
class ObservationContext:
    """Low-dimensional scene state plus a one-hot prompt selector."""

    state: np.ndarray
    prompt_onehot: np.ndarray

    def vector(self) -> np.ndarray:
        return np.concatenate([self.state, self.prompt_onehot])

    def validate(self) -> None:
        if not np.isfinite(self.state).all():
            raise ValueError("observation state contains non-finite values")
        one = self.prompt_onehot
        if one.sum() != 1.0 or not np.all((one == 0.0) | (one == 1.0)):
            raise ValueError("prompt encoding must be exactly one-hot")


class PolicyNet:
    """Encoder -> action expert -> {flow head, completion head} over one ParamSet."""

    def __init__(self, config: ModelConfig, params: ParamSet):
        self.config = config
        self.params = params
        self.encoder_spec = MlpSpec(
            (config.encoder_input_dim, *config.encoder_hidden, config.embed_dim)
        )
        self.expert_spec = MlpSpec(
            (config.embed_dim + config.chunk_size + 1, *config.expert_hidden, config.feature_dim)
        )
        self.flow_spec = MlpSpec((config.feature_dim, config.chunk_size))


def init_policy(config: ModelConfig, seed) -> PolicyNet:
    rng = seed if isinstance(seed, np.random.Generator) else make_rng(seed)
    params = ParamSet()
    net = PolicyNet(config, params)
    init_mlp(params, net.encoder_spec, "encoder", rng)
    init_mlp(params, net.expert_spec, "expert", rng)
    init_mlp(params, net.flow_spec, "flow_head", rng)
    params.register(
        "completion_head.W", glorot_uniform(rng, config.feature_dim, 1, (config.feature_dim,))
    )
    params.register("completion_head.b", np.zeros(()))
    return net


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return np.clip(out, P_CLIP, 1.0 - P_CLIP)


@dataclass
class SharedForward:
    """One pass through the trunk; both heads read the same feature matrix."""

    features: np.ndarray
    velocity: np.ndarray
    p: np.ndarray
    encoder_cache: object
    expert_cache: object
    flow_cache: object
    squeeze: bool


def _check_finite(arr: np.ndarray, stage: str) -> None:
    if not np.isfinite(arr).all():
        raise ValueError(f"non-finite values produced at stage {stage!r}")


def forward_shared(net: PolicyNet, z, a_tau, tau) -> SharedForward:
    """Single shared forward producing features F once, then v_hat and p from F."""
    z = np.asarray(z, dtype=np.float64)
    a_tau = np.asarray(a_tau, dtype=np.float64)
    squeeze = z.ndim == 1
    if squeeze:
        z = z[None, :]
        a_tau = a_tau[None, :]
    n = z.shape[0]
    tau_vec = np.broadcast_to(np.asarray(tau, dtype=np.float64), (n,)).reshape(n, 1)
    if a_tau.shape != (n, net.config.chunk_size):
        raise ValueError(
            f"action chunk shape {list(a_tau.shape)} does not match "
            f"(batch, {net.config.chunk_size})"
        )
    if net.config.obs_layout is not None and z.shape[1] == net.config.context_dim:
        z = expand_context(net.config.obs_layout, z)
    embed, enc_cache = mlp_forward(net.encoder_spec, net.params, z, "encoder")
    _check_finite(embed, "encoder")
    expert_in = np.concatenate([embed, a_tau, tau_vec], axis=1)
    features, exp_cache = mlp_forward(net.expert_spec, net.params, expert_in, "expert")
    _check_finite(features, "expert")
    velocity, flow_cache = mlp_forward(net.flow_spec, net.params, features, "flow_head")
    _check_finite(velocity, "flow_head")
    logit = features @ net.params.value("completion_head.W") + net.params.value("completion_head.b")
    _check_finite(logit, "completion_head")
    p = sigmoid(logit)
    return SharedForward(features, velocity, p, enc_cache, exp_cache, flow_cache, squeeze)


def interpolate_actions(a0, a1, tau: float) -> np.ndarray:
    """Straight-line interpolation (1 - tau) * a0 + tau * a1."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must be in [0, 1], got {tau}")
    a0 = np.asarray(a0, dtype=np.float64)
    a1 = np.asarray(a1, dtype=np.float64)
    if a0.shape != a1.shape:
        raise ValueError(f"chunk shapes differ: {list(a0.shape)} vs {list(a1.shape)}")
    return (1.0 - tau) * a0 + tau * a1


@dataclass
class FlowBatch:
    """Training minibatch: contexts, target chunks, labels, and per-sample draws."""

    contexts: np.ndarray  # (n, context_dim)
    targets: np.ndarray  # (n, chunk_size), ground-truth chunks
    labels: np.ndarray | None  # (n,) in {0, 1}; None when completion loss is unused
    noise: np.ndarray  # (n, chunk_size), a^(0) draws
    taus: np.ndarray  # (n,) uniform on [0, 1]

    def __len__(self) -> int:
        return self.contexts.shape[0]


def draw_flow_batch(contexts, targets, labels, rng: np.random.Generator) -> FlowBatch:
    contexts = np.asarray(contexts, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if labels is not None:
        labels = np.asarray(labels, dtype=np.float64)
        if not np.all((labels == 0.0) | (labels == 1.0)):
            raise ValueError("completion labels must be binary")
    noise = rng.standard_normal(targets.shape)
    taus = rng.uniform(0.0, 1.0, size=targets.shape[0])
    return FlowBatch(contexts, targets, labels, noise, taus)


def completion_loss(p: float, y) -> float:
    """Binary cross-entropy with the probability clamped away from 0 and 1."""
    p = min(max(float(p), BCE_EPS), 1.0 - BCE_EPS)
    y = float(y)
    return -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))


def _completion_loss_vec(p: np.ndarray, y: np.ndarray) -> np.ndarray:
    pc = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    return -(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))


@dataclass
class LossBreakdown:
    total: float
    action: float
    completion: float


def training_loss(
    net: PolicyNet,
    batch: FlowBatch,
    lam: float = 0.1,
    include_action: bool = True,
    include_completion: bool = True,
    forward_hook=None,
) -> LossBreakdown:
    """Compute enabled loss terms from one shared forward pass and accumulate
    gradients into the net's ParamSet (caller clears them via optimizer_step)."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    if lam < 0.0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    if include_completion and batch.labels is None:
        raise ValueError("completion loss requested but batch has no labels")
    n = len(batch)
    a_tau = batch.noise + batch.taus[:, None] * (batch.targets - batch.noise)
    fwd = forward_shared(net, batch.contexts, a_tau, batch.taus)
    if forward_hook is not None:
        forward_hook(fwd)

    action_loss = 0.0
    completion_mean = 0.0
    d_features = np.zeros_like(fwd.features)
    if include_action:
        residual = fwd.velocity - (batch.targets - batch.noise)
        action_loss = float(np.mean(np.sum(residual * residual, axis=1)))
        d_velocity = (2.0 / n) * residual
        d_features += mlp_backward(fwd.flow_cache, d_velocity, net.params)
    if include_completion:
        completion_mean = float(np.mean(_completion_loss_vec(fwd.p, batch.labels)))
        # Fused sigmoid+BCE gradient w.r.t. the logit.
        d_logit = (lam / n) * (fwd.p - batch.labels)
        w = net.params.value("completion_head.W")
        net.params.add_grad("completion_head.W", fwd.features.T @ d_logit)
        net.params.add_grad("completion_head.b", np.asarray(d_logit.sum()))
        d_features += d_logit[:, None] * w[None, :]

    d_expert_in = mlp_backward(fwd.expert_cache, d_features, net.params)
    d_embed = d_expert_in[:, : net.config.embed_dim]
    mlp_backward(fwd.encoder_cache, d_embed, net.params)

    total = action_loss + (lam * completion_mean if include_completion else 0.0)
    return LossBreakdown(total, action_loss, completion_mean)


def flow_matching_loss(net: PolicyNet, batch: FlowBatch) -> float:
    """Mean squared error between predicted velocity and (a1 - a0); accumulates grads."""
    return training_loss(net, batch, lam=0.0, include_completion=False).action


def total_loss(net: PolicyNet, batch: FlowBatch, lam: float = 0.1) -> LossBreakdown:
    return training_loss(net, batch, lam=lam)


def sample_action_chunks(
    net: PolicyNet, contexts: np.ndarray, steps: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Integrate the learned velocity field with explicit Euler steps for a
    batch of contexts; p is read from a final shared pass at tau = 1 so the
    indicator reflects the generated chunks."""
    if steps < 1:
        raise ValueError(f"integration steps must be >= 1, got {steps}")
    contexts = np.asarray(contexts, dtype=np.float64)
    if contexts.ndim != 2:
        raise ValueError("contexts must be (batch, context_dim)")
    n = contexts.shape[0]
    a = rng.standard_normal((n, net.config.chunk_size))
    for k in range(steps):
        fwd = forward_shared(net, contexts, a, k / steps)
        a = a + fwd.velocity / steps
        if not np.isfinite(a).all():
            raise ValueError(f"non-finite action trajectory at integration step {k}")
    final = forward_shared(net, contexts, a, 1.0)
    return a, final.p


def sample_action_chunk(
    net: PolicyNet, z, steps: int, rng: np.random.Generator
) -> tuple[np.ndarray, float]:
    """Single-context convenience wrapper around sample_action_chunks."""
    vec = z.vector() if isinstance(z, ObservationContext) else np.asarray(z, dtype=np.float64)
    chunks, ps = sample_action_chunks(net, vec[None, :], steps, rng)
    return chunks[0], float(ps[0])


def _tiled_offset_scale(config: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    off = np.tile(np.asarray(config.action_offset), config.chunk_len)
    scale = np.tile(np.asarray(config.action_scale), config.chunk_len)
    return off, scale


def normalize_actions(config: ModelConfig, raw: np.ndarray) -> np.ndarray:
    """Map raw simulator actions into model space; accepts (..., action_dim)
    rows or flattened (..., chunk_size) chunks."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape[-1] == config.action_dim:
        off = np.asarray(config.action_offset)
        scale = np.asarray(config.action_scale)
    elif raw.shape[-1] == config.chunk_size:
        off, scale = _tiled_offset_scale(config)
    else:
        raise ValueError(f"unexpected action width {raw.shape[-1]}")
    return (raw - off) * scale


def denormalize_actions(config: ModelConfig, scaled: np.ndarray) -> np.ndarray:
    scaled = np.asarray(scaled, dtype=np.float64)
    if scaled.shape[-1] == config.action_dim:
        off = np.asarray(config.action_offset)
        scale = np.asarray(config.action_scale)
    elif scaled.shape[-1] == config.chunk_size:
        off, scale = _tiled_offset_scale(config)
    else:
        raise ValueError(f"unexpected action width {scaled.shape[-1]}")
    return scaled / scale + off
