"""Hypergraph-GCN denoiser mapping (noisy 3D pose, 2D pose, timestep) to a clean 3D pose."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .kernels import graph_kernel, hypergraph_kernel_op
from .numerics import BatchNormState, Parameter, Tensor
from .skeleton import Skeleton, adjacency, incidence

ALL_SCALES = ("joint", "part", "body")
FUSIONS = ("weighted", "concat", "product")


class ConfigError(ValueError):
    pass


@dataclass
class DenoiserConfig:
    d_m: int = 128
    blocks: int = 3
    fusion: str = "weighted"
    scales: tuple[str, ...] = ALL_SCALES
    t_max: int = 1000

    def __post_init__(self):
        self.scales = tuple(s for s in ALL_SCALES if s in set(self.scales))
        self.validate()

    def validate(self):
        if self.d_m < 8:
            raise ConfigError(f"d_m must be >= 8, got {self.d_m}")
        if self.blocks < 1:
            raise ConfigError(f"blocks must be >= 1, got {self.blocks}")
        if self.fusion not in FUSIONS:
            raise ConfigError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if not self.scales:
            raise ConfigError("at least one scale is required")
        if self.t_max < 1:
            raise ConfigError(f"t_max must be >= 1, got {self.t_max}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scales"] = list(self.scales)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        d = dict(d)
        if "scales" in d:
            d["scales"] = tuple(d["scales"])
        return cls(**d)


def _uniform(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def sinusoidal_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """Transformer-style sin/cos features of integer timesteps, shape ``(len(t), dim)``."""
    t = np.asarray(t, dtype=float).reshape(-1, 1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    args = t * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        emb = np.pad(emb, ((0, 0), (0, 1)))
    return emb


def fuse(branches: list[Tensor], alphas: list[Tensor] | None, strategy: str,
         proj: Tensor | None = None) -> Tensor:
    """Combine per-scale branch features.

    weighted: sum of alpha_s * Z_s.  product: elementwise product.
    concat: feature-axis concatenation followed by ``proj`` (|S| d_m x d_m).
    """
    if not branches:
        raise ValueError("fuse needs at least one branch")
    if strategy == "weighted":
        out = nx.mul(branches[0], alphas[0])
        for z, a in zip(branches[1:], alphas[1:]):
            out = nx.add(out, nx.mul(z, a))
        return out
    if strategy == "product":
        out = branches[0]
        for z in branches[1:]:
            out = nx.mul(out, z)
        return out
    if strategy == "concat":
        return nx.matmul(nx.concat(branches, axis=-1), proj)
    raise ValueError(f"unknown fusion strategy {strategy!r}")


class Block:
    """One hypergraph GCN block: per-scale convolutions, fusion, residual BN."""

    def __init__(self, index: int, config: DenoiserConfig, rng: np.random.Generator):
        d = config.d_m
        self.scales = config.scales
        self.fusion = config.fusion
        p = f"block{index}"
        self.W = {s: Parameter(_uniform(rng, (d, d), d), f"{p}.W_{s}") for s in self.scales}
        self.alpha = {}
        self.W_fuse = None
        if self.fusion == "weighted":
            self.alpha = {s: Parameter(np.array(1.0), f"{p}.alpha_{s}") for s in self.scales}
        elif self.fusion == "concat":
            width = len(self.scales) * d
            self.W_fuse = Parameter(_uniform(rng, (width, d), width), f"{p}.W_fuse")
        self.W_res = Parameter(_uniform(rng, (d, d), d), f"{p}.res.W")
        self.b_res = Parameter(_uniform(rng, (d,), d), f"{p}.res.b")
        self.bn = BatchNormState.create(d, f"{p}.bn")

    def parameters(self) -> list[Parameter]:
        ps = [self.W[s] for s in self.scales]
        ps += [self.alpha[s] for s in self.scales if s in self.alpha]
        if self.W_fuse is not None:
            ps.append(self.W_fuse)
        return ps + [self.W_res, self.b_res, self.bn.gamma, self.bn.beta]

    def forward(self, z_prev, kernels: dict, mode: str = "train") -> Tensor:
        z_prev = nx.as_tensor(z_prev)
        branches = []
        for s in self.scales:
            if s not in kernels:
                raise KeyError(f"scale {s!r} is configured but no kernel was supplied")
            branches.append(nx.relu(nx.matmul(kernels[s], nx.matmul(z_prev, self.W[s]))))
        alphas = [self.alpha[s] for s in self.scales] if self.alpha else None
        z = fuse(branches, alphas, self.fusion, self.W_fuse)
        res = nx.add(nx.matmul(z_prev, self.W_res), self.b_res)
        return nx.relu(nx.add(z_prev, nx.batchnorm(nx.add(z, res), self.bn, mode)))


class DenoiserModel:
    def __init__(self, config: DenoiserConfig, skeleton: Skeleton, seed: int = 0):
        self.config = config
        self.skeleton = skeleton
        self.forward_count = 0
        rng = nx.make_rng(seed)
        d, j = config.d_m, skeleton.num_joints

        self.embed_W = Parameter(_uniform(rng, (5, d), 5), "embed.W")
        self.embed_b = Parameter(_uniform(rng, (d,), 5), "embed.b")
        self.spatial = Parameter(_uniform(rng, (j, d), d), "spatial")
        self.time_W1 = Parameter(_uniform(rng, (d, d), d), "time.W1")
        self.time_b1 = Parameter(_uniform(rng, (d,), d), "time.b1")
        self.time_W2 = Parameter(_uniform(rng, (d, d), d), "time.W2")
        self.time_b2 = Parameter(_uniform(rng, (d,), d), "time.b2")

        self.lambda_joint = graph_kernel(adjacency(skeleton)) if "joint" in config.scales else None
        self.incidence = {s: incidence(skeleton, s) for s in ("part", "body") if s in config.scales}
        # hyperedge weights M = exp(log_m); zeros give M = I
        self.log_m = {s: Parameter(np.zeros(h.shape[1]), f"kernels.log_m_{s}")
                      for s, h in self.incidence.items()}

        self.blocks = [Block(i, config, rng) for i in range(config.blocks)]
        self.head_W = Parameter(_uniform(rng, (d, 3), d), "head.W")
        self.head_b = Parameter(_uniform(rng, (3,), d), "head.b")

    # ------------------------------------------------------------------

    def parameters(self) -> list[Parameter]:
        ps = [self.embed_W, self.embed_b, self.spatial,
              self.time_W1, self.time_b1, self.time_W2, self.time_b2]
        ps += list(self.log_m.values())
        for b in self.blocks:
            ps += b.parameters()
        return ps + [self.head_W, self.head_b]

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for i, b in enumerate(self.blocks):
            out[f"block{i}.bn.running_mean"] = b.bn.running_mean
            out[f"block{i}.bn.running_var"] = b.bn.running_var
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters().items()}
        state.update({k: v.copy() for k, v in self.buffers().items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        expected = set(params) | set(self.buffers())
        missing = expected - set(state)
        extra = set(state) - expected
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in params.items():
            if state[name].shape != p.data.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.data.shape}")
            p.data[...] = state[name]
        for i, b in enumerate(self.blocks):
            b.bn.running_mean = np.array(state[f"block{i}.bn.running_mean"], dtype=float)
            b.bn.running_var = np.array(state[f"block{i}.bn.running_var"], dtype=float)

    # ------------------------------------------------------------------

    def kernels(self) -> dict:
        ks = {}
        if self.lambda_joint is not None:
            ks["joint"] = self.lambda_joint
        for s, h in self.incidence.items():
            ks[s] = hypergraph_kernel_op(h, self.log_m[s], self.skeleton.joints)
        return ks

    def time_embedding(self, t: np.ndarray) -> Tensor:
        base = sinusoidal_embedding(t, self.config.d_m)
        h = nx.relu(nx.add(nx.matmul(base, self.time_W1), self.time_b1))
        return nx.add(nx.matmul(h, self.time_W2), self.time_b2)

    def forward(self, y_t, x, t, mode: str = "train") -> Tensor:
        y_t = nx.as_tensor(y_t)
        x = nx.as_tensor(x)
        t = np.asarray(t).reshape(-1)
        j = self.skeleton.num_joints
        if y_t.ndim != 3 or y_t.shape[1:] != (j, 3):
            raise ValueError(f"y_t must have shape (B, {j}, 3), got {y_t.shape}")
        b = y_t.shape[0]
        if x.shape != (b, j, 2):
            raise ValueError(f"x must have shape ({b}, {j}, 2), got {x.shape}")
        if t.shape != (b,):
            raise ValueError(f"t must have length {b}, got shape {t.shape}")
        if np.any(t != np.round(t)) or t.min() < 1 or t.max() > self.config.t_max:
            raise ValueError(f"timesteps must be integers in [1, {self.config.t_max}]")

        z = nx.add(nx.matmul(nx.concat([y_t, x], axis=-1), self.embed_W), self.embed_b)
        z = nx.add(z, self.spatial)
        z = nx.add(z, nx.reshape(self.time_embedding(t), (b, 1, self.config.d_m)))
        kernels = self.kernels()
        for block in self.blocks:
            z = block.forward(z, kernels, mode)
        self.forward_count += b
        return nx.add(nx.matmul(z, self.head_W), self.head_b)

    __call__ = forward


def init_model(config: DenoiserConfig, skeleton: Skeleton, seed: int) -> DenoiserModel:
    return DenoiserModel(config, skeleton, seed)


def parameter_count(config: DenoiserConfig, num_joints: int, part_edges: int, body_edges: int) -> int:
    """Closed-form parameter count of a ``DenoiserModel``."""
    d, s = config.d_m, len(config.scales)
    n = 5 * d + d                 # embed
    n += num_joints * d           # spatial table
    n += 2 * (d * d + d)          # time MLP
    n += part_edges * ("part" in config.scales) + body_edges * ("body" in config.scales)
    per_block = s * d * d + d * d + d + 2 * d
    if config.fusion == "weighted":
        per_block += s
    elif config.fusion == "concat":
        per_block += s * d * d
    n += config.blocks * per_block
    n += 3 * d + 3                # head
    return n


def forward_macs(config: DenoiserConfig, num_joints: int, part_edges: int, body_edges: int,
                 batch: int = 1) -> int:
    """Multiply-accumulates performed by matmuls in one forward call."""
    d, j, s = config.d_m, num_joints, len(config.scales)
    macs = batch * j * 5 * d                  # input embedding
    macs += batch * 2 * d * d                 # time MLP
    for name, e in (("part", part_edges), ("body", body_edges)):
        if name in config.scales:
            macs += j * e + j * e * j         # vertex degrees, kernel assembly
    per_block = s * (j * d * d + j * j * d)   # Z W then kernel product
    if config.fusion == "concat":
        per_block += j * s * d * d
    per_block += j * d * d                    # residual linear
    macs += batch * config.blocks * per_block
    macs += batch * j * d * 3                 # head
    return macs
