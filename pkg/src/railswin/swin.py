"""Four-stage windowed-attention backbone with optional attention inserts.

The backbone follows the standard hierarchy: a 4x4 patch stem with linear
embedding, then four stages of alternating plain / shifted window
attention blocks, with 2x2 patch merging between stages.  Channel/spatial
attention can be inserted at one of three levels:

* ``model``: one full attention pass on the raw image before the stem.
* ``stage``: one pass on the partitioned (pre-projection) patch map at
  every stage entry.
* ``block``: a channel gate before each plain-window block's attention
  and a spatial gate before each shifted-window block's, applied to the
  normalized tokens reshaped to a [D, H, W] map inside the residual
  branch.

Token layouts: flat tokens are [..., L, D]; grids are [..., H, W, D];
maps are [..., D, H, W].  A single leading batch axis is supported
everywhere.
"""

from __future__ import annotations

import enum
import functools
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .cbam import (
    AttentionMaps,
    CbamParams,
    ChannelAttentionParams,
    SpatialAttentionParams,
    cbam_apply,
    channel_attention_map,
    refine,
    spatial_attention_map,
)
from .errors import IndivisibleInput, InvalidParam, ParseError, ShapeMismatch
from .tensor import Tensor

MASK_NEG = -1e9


class CbamPlacement(enum.Enum):
    NONE = "none"
    MODEL = "model"
    STAGE = "stage"
    BLOCK = "block"


# ---------------------------------------------------------------------------
# configuration


@dataclass
class SwinConfig:
    embed_dim: int = 96
    depths: tuple = (2, 2, 6, 2)
    num_heads: tuple = (3, 6, 12, 24)
    window_size: int = 7
    mlp_ratio: float = 4.0
    placement: CbamPlacement = CbamPlacement.NONE
    cbam_reduction: int = 16
    patch_size: int = 4
    input_size: tuple = (224, 224)
    seed: int = 0

    def __post_init__(self):
        self.depths = tuple(int(d) for d in self.depths)
        self.num_heads = tuple(int(h) for h in self.num_heads)
        self.input_size = tuple(int(v) for v in self.input_size)
        if isinstance(self.placement, str):
            self.placement = CbamPlacement(self.placement)
        self.validate()

    def validate(self):
        if len(self.depths) != 4 or len(self.num_heads) != 4:
            raise InvalidParam("depths and num_heads must both have 4 entries")
        if any(d < 1 for d in self.depths) or any(h < 1 for h in self.num_heads):
            raise InvalidParam("depths and num_heads must be positive")
        for s, heads in enumerate(self.num_heads):
            if (self.embed_dim * 2**s) % heads != 0:
                raise InvalidParam(
                    f"stage {s} dim {self.embed_dim * 2**s} not divisible by {heads} heads")
        if self.window_size < 1:
            raise InvalidParam("window_size must be >= 1")
        if self.mlp_ratio <= 0:
            raise InvalidParam("mlp_ratio must be positive")
        if self.patch_size < 1:
            raise InvalidParam("patch_size must be >= 1")
        if self.cbam_reduction < 1:
            raise InvalidParam("cbam_reduction must be >= 1")
        if len(self.input_size) != 2:
            raise InvalidParam("input_size must be (H, W)")

    def stage_dim(self, stage):
        return self.embed_dim * 2**stage


def nano_config(placement=CbamPlacement.NONE, seed=0):
    """Laptop-scale config: every mechanism exercised in milliseconds."""
    return SwinConfig(embed_dim=16, depths=(2, 2, 2, 2), num_heads=(1, 2, 4, 8),
                      window_size=2, mlp_ratio=2.0, placement=placement,
                      cbam_reduction=4, patch_size=4, input_size=(32, 32), seed=seed)


def tiny_config(placement=CbamPlacement.NONE, seed=0):
    """Full-size config (embed 96, depths 2-2-6-2, window 7, 224x224 input)."""
    return SwinConfig(embed_dim=96, depths=(2, 2, 6, 2), num_heads=(3, 6, 12, 24),
                      window_size=7, mlp_ratio=4.0, placement=placement,
                      cbam_reduction=16, patch_size=4, input_size=(224, 224), seed=seed)


_CONFIG_KEYS = ("embed_dim", "depths", "num_heads", "window_size", "mlp_ratio",
                "placement", "cbam_reduction", "patch_size", "input_size", "seed")


def config_to_dict(cfg):
    return {
        "embed_dim": cfg.embed_dim,
        "depths": list(cfg.depths),
        "num_heads": list(cfg.num_heads),
        "window_size": cfg.window_size,
        "mlp_ratio": cfg.mlp_ratio,
        "placement": cfg.placement.value,
        "cbam_reduction": cfg.cbam_reduction,
        "patch_size": cfg.patch_size,
        "input_size": list(cfg.input_size),
        "seed": cfg.seed,
    }


def config_from_dict(doc):
    if not isinstance(doc, dict):
        raise ParseError("config document must be a JSON object")
    unknown = set(doc) - set(_CONFIG_KEYS)
    if unknown:
        raise ParseError(f"unknown config keys: {sorted(unknown)}")
    missing = set(_CONFIG_KEYS) - set(doc)
    if missing:
        raise ParseError(f"missing config keys: {sorted(missing)}")
    try:
        return SwinConfig(
            embed_dim=int(doc["embed_dim"]),
            depths=tuple(doc["depths"]),
            num_heads=tuple(doc["num_heads"]),
            window_size=int(doc["window_size"]),
            mlp_ratio=float(doc["mlp_ratio"]),
            placement=CbamPlacement(doc["placement"]),
            cbam_reduction=int(doc["cbam_reduction"]),
            patch_size=int(doc["patch_size"]),
            input_size=tuple(doc["input_size"]),
            seed=int(doc["seed"]),
        )
    except (TypeError, ValueError) as e:
        raise ParseError(f"bad config value: {e}") from e


def save_config(cfg, path):
    with open(path, "w") as fh:
        json.dump(config_to_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_config(path):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise ParseError(f"cannot read config {path}: {e}") from e
    return config_from_dict(doc)


# ---------------------------------------------------------------------------
# parameters


@dataclass
class BlockParams:
    dim: int
    num_heads: int
    window: int
    norm1_g: Tensor
    norm1_b: Tensor
    qkv_w: Tensor
    qkv_b: Tensor
    proj_w: Tensor
    proj_b: Tensor
    bias_table: Tensor | None
    norm2_g: Tensor
    norm2_b: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor
    cbam: object = None  # ChannelAttentionParams | SpatialAttentionParams | None

    def named_parameters(self, prefix=""):
        pairs = [("norm1_g", self.norm1_g), ("norm1_b", self.norm1_b),
                 ("qkv_w", self.qkv_w), ("qkv_b", self.qkv_b),
                 ("proj_w", self.proj_w), ("proj_b", self.proj_b),
                 ("norm2_g", self.norm2_g), ("norm2_b", self.norm2_b),
                 ("mlp_w1", self.mlp_w1), ("mlp_b1", self.mlp_b1),
                 ("mlp_w2", self.mlp_w2), ("mlp_b2", self.mlp_b2)]
        if self.bias_table is not None:
            pairs.append(("bias_table", self.bias_table))
        out = [(prefix + n, t) for n, t in pairs]
        if self.cbam is not None:
            out += self.cbam.named_parameters(prefix + "cbam.")
        return out


@dataclass
class PatchMergeParams:
    norm_g: Tensor
    norm_b: Tensor
    w: Tensor  # [2D, 4D]

    def named_parameters(self, prefix=""):
        return [(prefix + "norm_g", self.norm_g), (prefix + "norm_b", self.norm_b),
                (prefix + "w", self.w)]


@dataclass
class StageParams:
    merge: PatchMergeParams | None
    cbam: CbamParams | None
    blocks: list = field(default_factory=list)

    def named_parameters(self, prefix=""):
        out = []
        if self.merge is not None:
            out += self.merge.named_parameters(prefix + "merge.")
        if self.cbam is not None:
            out += self.cbam.named_parameters(prefix + "cbam.")
        for i, b in enumerate(self.blocks):
            out += b.named_parameters(f"{prefix}block{i}.")
        return out


@dataclass
class BackboneParams:
    embed_w: Tensor  # [C, C_img * patch^2]
    embed_b: Tensor
    model_cbam: CbamParams | None
    stages: list = field(default_factory=list)

    def named_parameters(self):
        out = [("embed_w", self.embed_w), ("embed_b", self.embed_b)]
        if self.model_cbam is not None:
            out += self.model_cbam.named_parameters("model_cbam.")
        for s, st in enumerate(self.stages):
            out += st.named_parameters(f"stage{s}.")
        return out


def _xavier(rng, shape):
    fan_out, fan_in = shape[0], int(np.prod(shape[1:]))
    std = math.sqrt(2.0 / (fan_in + fan_out))
    return Tensor(rng.normal(0.0, std, shape), requires_grad=True)


def _init_block(dim, num_heads, window, mlp_ratio, rng, cbam=None):
    hidden = int(dim * mlp_ratio)
    n = (2 * window - 1) ** 2

    def w(*shape):
        return _xavier(rng, shape)

    def zeros(*shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    # residual-branch outputs (proj, second MLP layer) start at zero so every
    # block opens as the identity map; stabilizes short constant-lr runs
    return BlockParams(
        dim=dim, num_heads=num_heads, window=window,
        norm1_g=Tensor(np.ones(dim), requires_grad=True), norm1_b=zeros(dim),
        qkv_w=w(3 * dim, dim), qkv_b=zeros(3 * dim),
        proj_w=zeros(dim, dim), proj_b=zeros(dim),
        bias_table=Tensor(rng.normal(0.0, 0.02, (n, num_heads)), requires_grad=True),
        norm2_g=Tensor(np.ones(dim), requires_grad=True), norm2_b=zeros(dim),
        mlp_w1=w(hidden, dim), mlp_b1=zeros(hidden),
        mlp_w2=zeros(dim, hidden), mlp_b2=zeros(dim),
        cbam=cbam,
    )


def init_backbone_params(cfg, in_channels=1, rng=None):
    """Build all parameters, deterministically from cfg.seed."""
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    p = cfg.patch_size
    patch_dim = in_channels * p * p
    embed_w = _xavier(rng, (cfg.embed_dim, patch_dim))
    embed_b = Tensor(np.zeros(cfg.embed_dim), requires_grad=True)

    model_cbam = None
    if cfg.placement is CbamPlacement.MODEL:
        model_cbam = CbamParams.init(in_channels, cfg.cbam_reduction, rng)

    stages = []
    for s in range(4):
        dim = cfg.stage_dim(s)
        merge = None
        stage_entry_channels = patch_dim
        if s > 0:
            prev = cfg.stage_dim(s - 1)
            stage_entry_channels = 4 * prev
            merge = PatchMergeParams(
                norm_g=Tensor(np.ones(4 * prev), requires_grad=True),
                norm_b=Tensor(np.zeros(4 * prev), requires_grad=True),
                w=_xavier(rng, (2 * prev, 4 * prev)),
            )
        stage_cbam = None
        if cfg.placement is CbamPlacement.STAGE:
            stage_cbam = CbamParams.init(stage_entry_channels, cfg.cbam_reduction, rng)
        blocks = []
        for i in range(cfg.depths[s]):
            cbam = None
            if cfg.placement is CbamPlacement.BLOCK:
                if i % 2 == 0:
                    cbam = ChannelAttentionParams.init(dim, cfg.cbam_reduction, rng)
                else:
                    cbam = SpatialAttentionParams.init(rng)
            blocks.append(_init_block(dim, cfg.num_heads[s], cfg.window_size,
                                      cfg.mlp_ratio, rng, cbam=cbam))
        stages.append(StageParams(merge=merge, cbam=stage_cbam, blocks=blocks))
    return BackboneParams(embed_w=embed_w, embed_b=embed_b,
                          model_cbam=model_cbam, stages=stages)


def count_parameters(named_params):
    return sum(t.size for _, t in named_params)


# ---------------------------------------------------------------------------
# layout helpers


def _grid_to_chw(grid):
    n = grid.ndim
    return T.transpose(grid, tuple(range(n - 3)) + (n - 1, n - 3, n - 2))


def _chw_to_grid(chw):
    n = chw.ndim
    return T.transpose(chw, tuple(range(n - 3)) + (n - 2, n - 1, n - 3))


def window_partition(tokens, window):
    """[..., H, W, D] -> [..., num_windows, window^2, D], row-major windows."""
    if tokens.ndim < 3:
        raise ShapeMismatch(f"window_partition needs [..., H, W, D], got {tokens.shape}")
    H, W, D = tokens.shape[-3:]
    if H % window or W % window:
        raise IndivisibleInput(f"grid {H}x{W} not divisible by window {window}")
    lead = tokens.shape[:-3]
    n = len(lead)
    x = T.reshape(tokens, lead + (H // window, window, W // window, window, D))
    x = T.transpose(x, tuple(range(n)) + (n, n + 2, n + 1, n + 3, n + 4))
    return T.reshape(x, lead + ((H // window) * (W // window), window * window, D))


def window_reverse(windows, H, W):
    """Exact inverse of :func:`window_partition` for an H x W grid."""
    if windows.ndim < 3:
        raise ShapeMismatch(f"window_reverse needs [..., nW, T, D], got {windows.shape}")
    nW, Tsz, D = windows.shape[-3:]
    if nW * Tsz != H * W:
        raise ShapeMismatch(f"{nW} windows of {Tsz} tokens cannot tile {H}x{W}")
    window = math.isqrt(Tsz)
    if window * window != Tsz or H % window or W % window:
        raise ShapeMismatch(f"window tokens {Tsz} do not form a square tile of {H}x{W}")
    lead = windows.shape[:-3]
    n = len(lead)
    x = T.reshape(windows, lead + (H // window, W // window, window, window, D))
    x = T.transpose(x, tuple(range(n)) + (n, n + 2, n + 1, n + 3, n + 4))
    return T.reshape(x, lead + (H, W, D))


@functools.lru_cache(maxsize=None)
def _shift_mask_array(H, W, window, shift):
    # region bands on the unshifted grid: [0, shift), [shift, H-window+shift),
    # [H-window+shift, H); tokens may only attend within their own band pair
    def bands(extent):
        b = np.zeros(extent, dtype=np.int64)
        b[shift:extent - window + shift] = 1
        b[extent - window + shift:] = 2
        return b

    ids = bands(H)[:, None] * 3 + bands(W)[None, :]
    ids = np.roll(ids, (-shift, -shift), axis=(0, 1))
    idw = ids.reshape(H // window, window, W // window, window)
    idw = idw.transpose(0, 2, 1, 3).reshape(-1, window * window)
    same = idw[:, :, None] == idw[:, None, :]
    return np.where(same, 0.0, MASK_NEG)


def build_shift_mask(H, W, window, shift):
    """Attention mask [nW, T, T] hiding cross-band pairs after a cyclic shift."""
    if H % window or W % window:
        raise IndivisibleInput(f"grid {H}x{W} not divisible by window {window}")
    if shift not in (0, window // 2):
        raise InvalidParam(f"shift must be 0 or window//2 = {window // 2}, got {shift}")
    nW = (H // window) * (W // window)
    Tsz = window * window
    if shift == 0:
        return Tensor(np.zeros((nW, Tsz, Tsz)))
    return Tensor(_shift_mask_array(H, W, window, shift).copy())


@functools.lru_cache(maxsize=None)
def relative_position_index(window):
    """[T, T] lookup into the (2w-1)^2 relative-offset bias table."""
    coords = np.stack(np.meshgrid(np.arange(window), np.arange(window), indexing="ij"))
    flat = coords.reshape(2, -1)
    rel = flat[:, :, None] - flat[:, None, :]
    rel = rel.transpose(1, 2, 0).copy()
    rel[:, :, 0] += window - 1
    rel[:, :, 1] += window - 1
    rel[:, :, 0] *= 2 * window - 1
    idx = rel.sum(-1)
    idx.setflags(write=False)
    return idx


# ---------------------------------------------------------------------------
# attention and blocks


def window_msa(x, params, mask=None, num_heads=None):
    """Multi-head self-attention within each window.

    x: [..., nW, T, D].  Scores are QK^T / sqrt(D / heads), plus the
    relative-position bias (when the params carry a table) and the
    additive mask (when given), softmaxed over keys.
    """
    heads = num_heads if num_heads is not None else params.num_heads
    D = x.shape[-1]
    Tsz = x.shape[-2]
    if D % heads:
        raise ShapeMismatch(f"dim {D} not divisible by {heads} heads")
    hd = D // heads
    lead = x.shape[:-2]
    n = len(lead)

    qkv = T.linear(x, params.qkv_w, params.qkv_b)  # [..., T, 3D]
    parts = []
    for i in range(3):
        part = T.slice_axis(qkv, -1, i * D, (i + 1) * D)
        part = T.reshape(part, lead + (Tsz, heads, hd))
        # [..., T, h, hd] -> [..., h, T, hd]
        part = T.transpose(part, tuple(range(n)) + (n + 1, n, n + 2))
        parts.append(part)
    q, k, v = parts

    q = q * (1.0 / math.sqrt(hd))
    scores = T.matmul(q, T.transpose(k, tuple(range(n)) + (n, n + 2, n + 1)))

    if params.bias_table is not None:
        if params.bias_table.shape != ((2 * params.window - 1) ** 2, heads):
            raise ShapeMismatch(f"bias table {params.bias_table.shape} for window {params.window}")
        if Tsz != params.window**2:
            raise ShapeMismatch(f"{Tsz} tokens per window, expected {params.window**2}")
        idx = relative_position_index(params.window)
        bias = T.take(params.bias_table, idx)          # [T, T, h]
        bias = T.transpose(bias, (2, 0, 1))            # [h, T, T]
        scores = scores + bias

    if mask is not None:
        if mask.shape[-2:] != (Tsz, Tsz):
            raise ShapeMismatch(f"mask {mask.shape} does not fit {Tsz} tokens")
        scores = scores + T.reshape(mask, (mask.shape[0], 1, Tsz, Tsz))

    attn = T.softmax(scores, axis=-1)
    out = T.matmul(attn, v)                            # [..., h, T, hd]
    out = T.transpose(out, tuple(range(n)) + (n + 1, n, n + 2))
    out = T.reshape(out, lead + (Tsz, D))
    return T.linear(out, params.proj_w, params.proj_b)


def _block_cbam(x_grid, params, shift):
    """Gate normalized tokens (as a [D, H, W] map) inside the residual branch."""
    chw = _grid_to_chw(x_grid)
    if shift == 0:
        m = channel_attention_map(chw, params)
        chw = refine(chw, AttentionMaps(m_c=m), mode="channel_only")
    else:
        m = spatial_attention_map(chw, params)
        chw = refine(chw, AttentionMaps(m_s=m), mode="spatial_only")
    return _chw_to_grid(chw)


def swin_block_forward(x, hw, params, shift, use_cbam=False):
    """One block: LN -> [gate] -> (shift) window attention -> +residual -> MLP."""
    H, W = hw
    L, D = x.shape[-2:]
    if L != H * W:
        raise ShapeMismatch(f"{L} tokens != grid {H}x{W}")
    if D != params.dim:
        raise ShapeMismatch(f"token dim {D} != block dim {params.dim}")
    window = params.window
    lead = x.shape[:-2]
    n = len(lead)

    shortcut = x
    x = T.layer_norm(x, params.norm1_g, params.norm1_b)
    grid = T.reshape(x, lead + (H, W, D))

    if use_cbam and params.cbam is not None:
        grid = _block_cbam(grid, params.cbam, shift)

    pad_h = (-H) % window
    pad_w = (-W) % window
    if pad_h or pad_w:
        grid = T.zero_pad(grid, [(0, 0)] * n + [(0, pad_h), (0, pad_w), (0, 0)])
    Hp, Wp = H + pad_h, W + pad_w

    mask = None
    if shift:
        grid = T.roll(grid, (-shift, -shift), axes=(n, n + 1))
        mask = build_shift_mask(Hp, Wp, window, shift)

    windows = window_partition(grid, window)
    attended = window_msa(windows, params, mask=mask)
    grid = window_reverse(attended, Hp, Wp)

    if shift:
        grid = T.roll(grid, (shift, shift), axes=(n, n + 1))
    if pad_h or pad_w:
        grid = T.slice_axis(grid, n, 0, H)
        grid = T.slice_axis(grid, n + 1, 0, W)

    x = T.reshape(grid, lead + (L, D)) + shortcut
    y = T.layer_norm(x, params.norm2_g, params.norm2_b)
    y = T.linear(y, params.mlp_w1, params.mlp_b1)
    y = T.gelu(y)
    y = T.linear(y, params.mlp_w2, params.mlp_b2)
    return x + y


def swin_block_pair_forward(x, hw, params_pair, cfg, placement=None):
    """Two successive blocks: plain-window then shifted-window attention."""
    placement = cfg.placement if placement is None else placement
    use_cbam = placement is CbamPlacement.BLOCK
    p1, p2 = params_pair
    x = swin_block_forward(x, hw, p1, shift=0, use_cbam=use_cbam)
    return swin_block_forward(x, hw, p2, shift=cfg.window_size // 2, use_cbam=use_cbam)


# ---------------------------------------------------------------------------
# stem, merging, full forward


def patch_partition_embed(image, cfg, params, stage_cbam=None):
    """Split into patch_size^2 patches, flatten channel-first, embed to C.

    image: [..., C_img, H, W] with H, W divisible by patch_size (no silent
    padding at the stem).  Returns flat tokens [..., (H/p)*(W/p), C].
    When ``stage_cbam`` is given the partitioned patch map is gated before
    the linear embedding.
    """
    p = cfg.patch_size
    if image.ndim < 3:
        raise ShapeMismatch(f"image must be [..., C, H, W], got {image.shape}")
    C_img, H, W = image.shape[-3:]
    if H % p or W % p:
        raise IndivisibleInput(f"image {H}x{W} not divisible by patch size {p}")
    if params.embed_w.shape[1] != C_img * p * p:
        raise ShapeMismatch(
            f"image channels {C_img} do not match embedding input {params.embed_w.shape[1]}")
    lead = image.shape[:-3]
    n = len(lead)
    Hp, Wp = H // p, W // p

    x = T.reshape(image, lead + (C_img, Hp, p, Wp, p))
    x = T.transpose(x, tuple(range(n)) + (n + 1, n + 3, n, n + 2, n + 4))
    x = T.reshape(x, lead + (Hp, Wp, C_img * p * p))

    if stage_cbam is not None:
        chw = _grid_to_chw(x)
        chw = cbam_apply(chw, stage_cbam.cam, stage_cbam.sam)
        x = _chw_to_grid(chw)

    x = T.reshape(x, lead + (Hp * Wp, C_img * p * p))
    return T.linear(x, params.embed_w, params.embed_b)


def patch_merging(x, params, stage_cbam=None):
    """Concatenate 2x2 neighborhoods (row-major), normalize, project to 2D.

    x: [..., H, W, D] with H, W even -> [..., H/2, W/2, 2D].
    """
    if x.ndim < 3:
        raise ShapeMismatch(f"patch_merging needs [..., H, W, D], got {x.shape}")
    H, W, D = x.shape[-3:]
    if H % 2 or W % 2:
        raise IndivisibleInput(f"grid {H}x{W} not divisible by 2")
    if params.w.shape != (2 * D, 4 * D):
        raise ShapeMismatch(f"merge weight {params.w.shape} != ({2 * D}, {4 * D})")
    lead = x.shape[:-3]
    n = len(lead)
    x = T.reshape(x, lead + (H // 2, 2, W // 2, 2, D))
    x = T.transpose(x, tuple(range(n)) + (n, n + 2, n + 1, n + 3, n + 4))
    x = T.reshape(x, lead + (H // 2, W // 2, 4 * D))
    if stage_cbam is not None:
        chw = _grid_to_chw(x)
        chw = cbam_apply(chw, stage_cbam.cam, stage_cbam.sam)
        x = _chw_to_grid(chw)
    x = T.layer_norm(x, params.norm_g, params.norm_b)
    return T.linear(x, params.w)


def backbone_forward(image, cfg, params):
    """Run all four stages; returns the four stage outputs as [..., D, H, W] maps."""
    if cfg.placement is CbamPlacement.MODEL:
        image = cbam_apply(image, params.model_cbam.cam, params.model_cbam.sam)

    lead = image.shape[:-3]
    n = len(lead)
    H = image.shape[-2] // cfg.patch_size
    W = image.shape[-1] // cfg.patch_size

    stage0_cbam = params.stages[0].cbam if cfg.placement is CbamPlacement.STAGE else None
    tokens = patch_partition_embed(image, cfg, params, stage_cbam=stage0_cbam)

    features = []
    for s in range(4):
        st = params.stages[s]
        if s > 0:
            grid = T.reshape(tokens, lead + (H, W, cfg.stage_dim(s - 1)))
            cb = st.cbam if cfg.placement is CbamPlacement.STAGE else None
            grid = patch_merging(grid, st.merge, stage_cbam=cb)
            H, W = H // 2, W // 2
            tokens = T.reshape(grid, lead + (H * W, cfg.stage_dim(s)))
        shift = cfg.window_size // 2
        for i, bp in enumerate(st.blocks):
            use_cbam = cfg.placement is CbamPlacement.BLOCK
            tokens = swin_block_forward(tokens, (H, W), bp,
                                        shift=0 if i % 2 == 0 else shift,
                                        use_cbam=use_cbam)
        grid = T.reshape(tokens, lead + (H, W, cfg.stage_dim(s)))
        features.append(_grid_to_chw(grid))
    return features


def count_cbam_invocations(cfg):
    """Attention applications per forward pass for the configured placement."""
    if cfg.placement is CbamPlacement.NONE:
        return 0
    if cfg.placement is CbamPlacement.MODEL:
        return 1
    if cfg.placement is CbamPlacement.STAGE:
        return 4
    return sum(cfg.depths)


def trace_shapes(cfg):
    """Expected (dim, H, W) of each stage output, by stem/merging arithmetic."""
    H, W = cfg.input_size
    H, W = H // cfg.patch_size, W // cfg.patch_size
    out = []
    for s in range(4):
        if s > 0:
            H, W = H // 2, W // 2
        out.append((cfg.stage_dim(s), H, W))
    return out


class SwinBackbone:
    """Config + parameters bundle with a forward convenience method."""

    def __init__(self, cfg, in_channels=1, params=None):
        cfg.validate()
        self.cfg = cfg
        self.in_channels = in_channels
        self.params = params if params is not None else init_backbone_params(cfg, in_channels)

    def forward(self, image):
        return backbone_forward(image, self.cfg, self.params)

    def named_parameters(self):
        return self.params.named_parameters()

    def parameters(self):
        return [t for _, t in self.named_parameters()]
