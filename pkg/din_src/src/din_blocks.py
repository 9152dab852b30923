"""The interleaved multi-branch network: RDB, WRDB, AsyCA fusion and the SR head."""
import logging
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from nn_ops import (
    LEAKY_SLOPE,
    Conv2dParams,
    DepthwiseConv1x1Params,
    channel_pair_softmax,
    conv2d,
    depthwise_conv1x1,
    global_avg_pool,
    leaky_relu,
    make_conv2d,
    make_depthwise,
    pixel_shuffle,
    relu,
)
from tensor_engine import ParameterStore, Tensor, add, concat_channels, full_like, mul, scale, sub
from utils import ConfigError, config_hash, err_field, err_mismatch

logger = logging.getLogger(__name__)

FUSION_MODES = ("asyca", "concat", "sum", "mean")
SCALES = (2, 3, 4)
PUBLISHED_PARAMS = 19_880_000

Node = tuple[int, int]
SOURCE: Node = (0, 0)


@dataclass(frozen=True)
class ModelConfig:
    """Network hyperparameters. Defaults are the published configuration."""

    branches: int = 4
    wrdbs_per_branch: int = 5
    rdbs_per_wrdb: int = 3
    convs_per_rdb: int = 6
    growth: int = 32
    base_channels: int = 64
    scale: int = 2
    attn_reduction: int = 16
    use_asyca: bool = True
    use_dwc: bool = True
    use_gff: bool = True
    fusion_mode: str = "asyca"
    attn_zero_init: bool = False

    def __post_init__(self):
        for name in ("branches", "wrdbs_per_branch", "rdbs_per_wrdb", "convs_per_rdb", "growth", "base_channels", "attn_reduction"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(err_field(f"model.{name}", f"must be a positive integer, got {value!r}."))
        for name in ("use_asyca", "use_dwc", "use_gff", "attn_zero_init"):
            if not isinstance(getattr(self, name), bool):
                raise ConfigError(err_field(f"model.{name}", "must be true or false."))
        if self.scale not in SCALES:
            raise ConfigError(err_field("model.scale", f"must be one of {SCALES}, got {self.scale!r}."))
        if self.base_channels % self.attn_reduction:
            raise ConfigError(err_field(
                "model.attn_reduction",
                f"{self.attn_reduction} does not divide base_channels {self.base_channels}.",
            ))
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(err_field("model.fusion_mode", f"must be one of {FUSION_MODES}, got {self.fusion_mode!r}."))
        # Non-attention fusion modes switch attention off.
        if self.fusion_mode != "asyca" and self.use_asyca:
            object.__setattr__(self, "use_asyca", False)

    @property
    def fusion(self) -> str:
        """Fusion actually applied at interleaved nodes."""
        if self.fusion_mode == "asyca":
            return "asyca" if self.use_asyca else "sum"
        return self.fusion_mode

    @property
    def topology(self) -> "InterleaveTopology":
        return InterleaveTopology(self.branches, self.wrdbs_per_branch)

    def snapshot(self) -> dict:
        return asdict(self)

    def digest(self) -> bytes:
        return config_hash(self.snapshot())

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(err_field(f"model.{unknown[0]}", "unknown key.", f"Known keys: {', '.join(sorted(known))}."))
        return cls(**data)


@dataclass(frozen=True)
class InterleaveTopology:
    """Wiring of the (branch, depth) grid of WRDB nodes.

    Node (m, d) is the d-th WRDB of branch m, both 1-based. `SOURCE` stands for
    the shallow features. Branch 1 is a plain chain; every node of a later
    branch fuses two inputs.
    """

    branches: int
    depth: int

    def node_inputs(self, m: int, d: int) -> tuple[Node, ...]:
        if not (1 <= m <= self.branches and 1 <= d <= self.depth):
            raise ValueError(f"Node ({m}, {d}) is outside the {self.branches}x{self.depth} grid.")
        if m == 1:
            return (SOURCE,) if d == 1 else ((1, d - 1),)
        if d == 1:
            return (m - 1, self.depth), (m - 1, 1)
        return (m - 1, d), (m, d - 1)

    def evaluation_order(self) -> list[Node]:
        return [(m, d) for m in range(1, self.branches + 1) for d in range(1, self.depth + 1)]

    def fusion_nodes(self) -> list[Node]:
        return [node for node in self.evaluation_order() if len(self.node_inputs(*node)) == 2]

    def is_topologically_ordered(self) -> bool:
        seen = {SOURCE}
        for node in self.evaluation_order():
            if any(src not in seen for src in self.node_inputs(*node)):
                return False
            seen.add(node)
        return True


# --- Parameter containers ---

@dataclass
class RDBParams:
    layers: list[Conv2dParams]
    fusion: Conv2dParams


@dataclass
class WRDBParams:
    head: Conv2dParams
    rdbs: list[RDBParams]
    # (target, source): target b in 1..B feeds RDB b, target B+1 is the block tail.
    links: dict[tuple[int, int], DepthwiseConv1x1Params] = field(default_factory=dict)


@dataclass
class AsyCAParams:
    integrate: Conv2dParams  # 1x1, 2C -> C
    squeeze: Conv2dParams  # 1x1, C -> C/r
    excite: Conv2dParams  # 1x1, C/r -> 2C


@dataclass
class FusionParams:
    mode: str
    reduce: Conv2dParams | None = None
    attention: AsyCAParams | None = None


@dataclass
class DINParams:
    config: ModelConfig
    store: ParameterStore
    sfe: Conv2dParams
    branches: list[list[WRDBParams]]
    fusions: dict[Node, FusionParams]
    gff_reduce: Conv2dParams | None
    gff_conv: Conv2dParams | None
    upsample: Conv2dParams
    reconstruct: Conv2dParams


def build_rdb(store: ParameterStore, name: str, cfg: ModelConfig, seed: int, dtype, initialize: bool = True) -> RDBParams:
    c, g = cfg.base_channels, cfg.growth
    layers = [
        make_conv2d(store, f"{name}.conv{i + 1}", c + i * g, g, 3, seed, dtype, initialize=initialize)
        for i in range(cfg.convs_per_rdb)
    ]
    fusion = make_conv2d(store, f"{name}.fusion", c + cfg.convs_per_rdb * g, c, 1, seed, dtype, initialize=initialize)
    return RDBParams(layers, fusion)


def build_wrdb(store: ParameterStore, name: str, cfg: ModelConfig, seed: int, dtype, initialize: bool = True) -> WRDBParams:
    c, blocks = cfg.base_channels, cfg.rdbs_per_wrdb
    head = make_conv2d(store, f"{name}.head", c, c, 3, seed, dtype, initialize=initialize)
    rdbs = [build_rdb(store, f"{name}.rdb{b}", cfg, seed, dtype, initialize) for b in range(1, blocks + 1)]
    links = {}
    if cfg.use_dwc:
        for target in range(1, blocks + 1):
            for source in range(target):
                links[(target, source)] = make_depthwise(store, f"{name}.dwc{target}_{source}", c, dtype)
        links[(blocks + 1, 0)] = make_depthwise(store, f"{name}.dwc_tail", c, dtype)
    return WRDBParams(head, rdbs, links)


def build_fusion(store: ParameterStore, name: str, cfg: ModelConfig, seed: int, dtype, initialize: bool = True) -> FusionParams:
    c = cfg.base_channels
    mode = cfg.fusion
    if mode == "concat":
        return FusionParams(mode, reduce=make_conv2d(store, f"{name}.reduce", 2 * c, c, 1, seed, dtype, initialize=initialize))
    if mode == "asyca":
        hidden = c // cfg.attn_reduction
        attention = AsyCAParams(
            integrate=make_conv2d(store, f"{name}.integrate", 2 * c, c, 1, seed, dtype, initialize=initialize),
            squeeze=make_conv2d(store, f"{name}.squeeze", c, hidden, 1, seed, dtype, initialize=initialize),
            excite=make_conv2d(store, f"{name}.excite", hidden, 2 * c, 1, seed, dtype, zero=cfg.attn_zero_init, initialize=initialize),
        )
        return FusionParams(mode, attention=attention)
    return FusionParams(mode)


def build_din_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32, initialize: bool = True) -> DINParams:
    """Create every learnable tensor of the network.

    With initialize=False all weights are zero (depth-wise scalings stay one);
    useful for counting and as a target for loading saved weights.
    """
    store = ParameterStore()
    c, r = cfg.base_channels, cfg.scale
    sfe = make_conv2d(store, "sfe", 3, c, 3, seed, dtype, initialize=initialize)
    branches = [
        [build_wrdb(store, f"branch{m}.wrdb{d}", cfg, seed, dtype, initialize) for d in range(1, cfg.wrdbs_per_branch + 1)]
        for m in range(1, cfg.branches + 1)
    ]
    fusions = {
        (m, d): build_fusion(store, f"fusion{m}_{d}", cfg, seed, dtype, initialize)
        for (m, d) in cfg.topology.fusion_nodes()
    }
    gff_reduce = gff_conv = None
    if cfg.use_gff:
        gff_reduce = make_conv2d(store, "gff.reduce", cfg.branches * c, c, 1, seed, dtype, initialize=initialize)
        gff_conv = make_conv2d(store, "gff.conv", c, c, 3, seed, dtype, initialize=initialize)
    upsample = make_conv2d(store, "head.upsample", c, 3 * r * r, 3, seed, dtype, initialize=initialize)
    reconstruct = make_conv2d(store, "head.reconstruct", 3, 3, 3, seed, dtype, initialize=initialize)
    logger.debug("Built %d parameter tensors (%d scalars)", len(store), store.num_scalars())
    return DINParams(cfg, store, sfe, branches, fusions, gff_reduce, gff_conv, upsample, reconstruct)


# --- Forward passes ---

def _check_channels(x: Tensor, expected: int, what: str) -> None:
    if x.c != expected:
        raise ValueError(err_mismatch(f"{what} channels", expected, x.c))


def rdb_forward(x: Tensor, p: RDBParams, slope: float = LEAKY_SLOPE) -> Tensor:
    _check_channels(x, p.fusion.out_channels, "RDB input")
    features = [x]
    for layer in p.layers:
        inp = features[0] if len(features) == 1 else concat_channels(features)
        features.append(leaky_relu(conv2d(inp, layer), slope))
    return add(x, conv2d(concat_channels(features), p.fusion))


def _link(x: Tensor, weight: DepthwiseConv1x1Params | None, use_dwc: bool) -> Tensor:
    if use_dwc and weight is not None:
        return depthwise_conv1x1(x, weight)
    return x


def wrdb_forward(x: Tensor, p: WRDBParams, use_dwc: bool = True, slope: float = LEAKY_SLOPE) -> Tensor:
    """Head conv, then RDBs fed by the weighted sum of every earlier output."""
    _check_channels(x, p.head.in_channels, "WRDB input")
    outputs = [conv2d(x, p.head)]
    blocks = len(p.rdbs)
    for b in range(1, blocks + 1):
        inp = _link(outputs[0], p.links.get((b, 0)), use_dwc)
        for i in range(1, b):
            inp = add(inp, _link(outputs[i], p.links.get((b, i)), use_dwc))
        outputs.append(rdb_forward(inp, p.rdbs[b - 1], slope))
    return add(outputs[blocks], _link(outputs[0], p.links.get((blocks + 1, 0)), use_dwc))


def asyca_forward(x1: Tensor, x2: Tensor, p: AsyCAParams) -> Tensor:
    """Per-channel convex combination alpha*x1 + (1-alpha)*x2 with learned alpha."""
    if x1.shape != x2.shape:
        raise ValueError(err_mismatch("AsyCA operand shape", x1.shape, x2.shape))
    u = conv2d(concat_channels([x1, x2]), p.integrate)
    s = conv2d(relu(conv2d(global_avg_pool(u), p.squeeze)), p.excite)
    alpha = channel_pair_softmax(s)
    beta = sub(full_like(alpha, 1.0), alpha)
    return add(mul(alpha, x1), mul(beta, x2))


def fuse_node(x1: Tensor, x2: Tensor, mode: str, params: FusionParams | None = None) -> Tensor:
    if x1.shape != x2.shape:
        raise ValueError(err_mismatch("Fusion operand shape", x1.shape, x2.shape))
    if mode == "sum":
        return add(x1, x2)
    if mode == "mean":
        return scale(add(x1, x2), 0.5)
    if mode == "concat":
        return conv2d(concat_channels([x1, x2]), params.reduce)
    if mode == "asyca":
        return asyca_forward(x1, x2, params.attention)
    raise ValueError(f"Unknown fusion mode '{mode}'. Available: {', '.join(FUSION_MODES)}.")


def din_forward(x: Tensor, params: DINParams, trace: list | None = None) -> Tensor:
    """LR image (n, 3, h, w) in [0, 1] -> SR image (n, 3, r*h, r*w).

    When `trace` is a list, (node, input nodes) pairs are appended in
    evaluation order.
    """
    cfg = params.config
    _check_channels(x, 3, "Network input")
    topology = cfg.topology
    f0 = conv2d(x, params.sfe)
    features: dict[Node, Tensor] = {SOURCE: f0}
    for m, d in topology.evaluation_order():
        sources = topology.node_inputs(m, d)
        if len(sources) == 1:
            inp = features[sources[0]]
        else:
            inp = fuse_node(features[sources[0]], features[sources[1]], cfg.fusion, params.fusions[(m, d)])
        features[(m, d)] = wrdb_forward(inp, params.branches[m - 1][d - 1], cfg.use_dwc)
        if trace is not None:
            trace.append(((m, d), sources))

    last = cfg.wrdbs_per_branch
    if cfg.use_gff:
        outs = [features[(m, last)] for m in range(1, cfg.branches + 1)]
        merged = outs[0] if len(outs) == 1 else concat_channels(outs)
        global_features = conv2d(conv2d(merged, params.gff_reduce), params.gff_conv)
    else:
        global_features = features[(cfg.branches, last)]
    dense = add(f0, global_features)
    return conv2d(pixel_shuffle(conv2d(dense, params.upsample), cfg.scale), params.reconstruct)


# --- Self-ensemble ---

def dihedral(data: np.ndarray, k: int, flip: bool) -> np.ndarray:
    """Optional horizontal flip then k quarter turns over the (h, w) axes."""
    out = data[..., ::-1] if flip else data
    return np.ascontiguousarray(np.rot90(out, k, axes=(-2, -1)))


def dihedral_inverse(data: np.ndarray, k: int, flip: bool) -> np.ndarray:
    out = np.rot90(data, -k, axes=(-2, -1))
    if flip:
        out = out[..., ::-1]
    return np.ascontiguousarray(out)


DIHEDRAL_GROUP = [(k, flip) for flip in (False, True) for k in range(4)]


def self_ensemble_infer(x: Tensor, params: DINParams) -> Tensor:
    """Average of inverse-transformed predictions over the 8 dihedral transforms."""
    total = None
    for k, flip in DIHEDRAL_GROUP:
        pred = din_forward(Tensor(dihedral(x.data, k, flip)), params).data
        restored = dihedral_inverse(pred, k, flip)
        total = restored if total is None else total + restored
    return Tensor(total / len(DIHEDRAL_GROUP))


# --- Parameter accounting ---

@dataclass
class ParameterCount:
    total: int
    breakdown: dict[str, int]

    @property
    def published_delta(self) -> float:
        """Relative difference against the published 19.88M."""
        return (self.total - PUBLISHED_PARAMS) / PUBLISHED_PARAMS


def _group_of(name: str) -> str:
    head = name.split(".", 1)[0]
    return "fusion" if head.startswith("fusion") else head


def count_parameters(cfg: ModelConfig) -> ParameterCount:
    """Enumerate the parameter store; breakdown groups: sfe, branchN, fusion, gff, head."""
    store = build_din_params(cfg, initialize=False).store
    breakdown = {"sfe": 0}
    breakdown.update({f"branch{m}": 0 for m in range(1, cfg.branches + 1)})
    breakdown.update({"fusion": 0, "gff": 0, "head": 0})
    for name, tensor in store.items():
        breakdown[_group_of(name)] += tensor.size
    return ParameterCount(store.num_scalars(), breakdown)


def ablation_grid(base: ModelConfig) -> list[tuple[str, ModelConfig]]:
    """The eight on/off combinations of attention fusion, DWCs and GFF."""
    runs = []
    for use_asyca in (False, True):
        for use_dwc in (False, True):
            for use_gff in (False, True):
                label = "asyca{}-dwc{}-gff{}".format(*(int(v) for v in (use_asyca, use_dwc, use_gff)))
                runs.append((label, replace(base, fusion_mode="asyca", use_asyca=use_asyca, use_dwc=use_dwc, use_gff=use_gff)))
    return runs
