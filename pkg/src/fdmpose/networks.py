"""Describe-stage networks: rotation-invariant 3D encoder/decoder, 2D
convolutional encoder, linear/softmax attention, and the latent fusion module.

Geometry-dependent constants (sampling hierarchies, neighbor sets, pairwise
point-pair features) are precomputed per cloud into a :class:`Context3D` so a
forward pass is pure tensor ops; only point pair features, never raw
coordinates, enter the 3D feature path, which makes the 3D stream invariant
to rigid motion by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .geometry import NodeAssignment, PointCloud, point_to_node, ppf_pairs, _angles_batch
from .tensor import (ParameterStore, Tensor, add, concatenate, div, elu1,
                     gather, layer_norm, matmul, mul, relu, reshape, scatter_add,
                     softmax, sub, sum_, transpose)

_NEG = -1e9


@dataclass
class NetConfig:
    d: int = 256
    fine_dim: int = 64
    encoder_strides: tuple = (1, 4, 2, 2)
    n_superpoints: int = 128
    neighborhood_radius: float = 0.03
    fusion_layers: int = 4  # self/cross layers per latent fusion transformer
    heads: int = 4
    global_blocks: int = 3
    neighbor_k: int = 16
    ppf_hidden: int = 16
    ffn_mult: int = 2

    def __post_init__(self):
        if any(s <= 0 for s in self.encoder_strides):
            raise ValueError("encoder strides must be positive")
        if self.d % (4 * self.heads) != 0:
            raise ValueError("d must be divisible by 4 * heads")

    @property
    def encoder_dims(self):
        return (self.d // 4, self.d // 2, self.d, self.d)

    @property
    def decoder_dims(self):
        return (self.d, self.d, self.d // 2, self.fine_dim)

    @property
    def conv_widths(self):
        return (self.d // 4, self.d // 2, self.d)

    @classmethod
    def paper_scale(cls) -> "NetConfig":
        return cls()

    @classmethod
    def desk_scale(cls) -> "NetConfig":
        return cls(d=64, fine_dim=32, n_superpoints=32)


@dataclass
class SuperpointSet:
    coords: np.ndarray
    normals: np.ndarray
    features: Tensor
    assignment: NodeAssignment  # dense point -> superpoint
    skips: list = field(default_factory=list)  # per-level encoder outputs
    ctx: "Context3D | None" = None

    def with_features(self, features: Tensor) -> "SuperpointSet":
        return SuperpointSet(self.coords, self.normals, features,
                             self.assignment, self.skips, self.ctx)


@dataclass
class FeatureGrid:
    features: Tensor  # (gh * gw, d), row-major
    grid_h: int
    grid_w: int
    pixel_centers: np.ndarray  # (gh * gw, 2) as (u, v)


# ---------------------------------------------------------------------------
# per-cloud geometric context


@dataclass
class Level3D:
    coords: np.ndarray
    normals: np.ndarray
    sample_idx: np.ndarray  # into the previous (finer) level
    nbr_idx: np.ndarray  # (n, k) neighbors in the previous level
    nbr_mask: np.ndarray  # (n, k): 0 inside radius, -1e9 outside
    aal_ppf: np.ndarray  # (n * k, 4) center-to-neighbor pair features
    pal_ppf: np.ndarray  # (n * n, 4) pairwise features within the level
    parent_of_prev: np.ndarray  # previous-level point -> this level's node


@dataclass
class Context3D:
    levels: list
    dense_assignment: NodeAssignment


def _ppf_center_neighbors(centers, cnormals, nbr_pos, nbr_nrm):
    # (n, k, 4) features from each center to its neighbors
    d = nbr_pos - centers[:, None, :]
    dist = np.linalg.norm(d, axis=2)
    dn = d / np.maximum(dist, 1e-300)[:, :, None]
    a1 = _angles_batch(cnormals[:, None, :], dn)
    a2 = _angles_batch(nbr_nrm, dn)
    a3 = _angles_batch(cnormals[:, None, :], nbr_nrm)
    out = np.stack([a1, a2, np.broadcast_to(a3, dist.shape).copy(), dist], axis=2)
    out[dist == 0.0] = 0.0
    return out


def precompute_3d_context(cloud: PointCloud, cfg: NetConfig,
                          sample_indices: list | None = None) -> Context3D:
    """Sampling hierarchy, neighborhoods, and PPF blocks for one cloud."""
    if cloud.normals is None:
        raise ValueError("3D context requires unit normals")
    n = len(cloud)
    if n < cfg.n_superpoints:
        raise ValueError(f"cloud has {n} points but {cfg.n_superpoints} superpoints requested")
    coords, normals = cloud.points, cloud.normals
    levels = []
    for l, stride in enumerate(cfg.encoder_strides):
        n_in = coords.shape[0]
        n_out = cfg.n_superpoints if l == len(cfg.encoder_strides) - 1 else max(
            cfg.n_superpoints, n_in // stride)
        if sample_indices is not None:
            idx = np.asarray(sample_indices[l], dtype=np.int64)
        elif n_out >= n_in:
            idx = np.arange(n_in, dtype=np.int64)
        else:
            idx = kernels.fps(coords, n_out, 0)
        centers = coords[idx]
        cnormals = normals[idx]
        k = min(cfg.neighbor_k, n_in)
        nbr_idx, nbr_dist = kernels.knn(centers, coords, k)
        radius = cfg.neighborhood_radius * (2.0 ** l)
        mask = np.where(nbr_dist <= radius, 0.0, _NEG)
        mask[:, : min(4, k)] = 0.0  # never let a neighborhood go empty
        aal = _ppf_center_neighbors(centers, cnormals, coords[nbr_idx], normals[nbr_idx])
        pal = ppf_pairs(centers, cnormals, centers, cnormals)
        parent = point_to_node(coords, centers).node_of_point
        levels.append(Level3D(centers, cnormals, idx, nbr_idx, mask,
                              aal.reshape(-1, 4), pal.reshape(-1, 4), parent))
        coords, normals = centers, cnormals
    dense_assignment = point_to_node(cloud.points, levels[-1].coords)
    return Context3D(levels=levels, dense_assignment=dense_assignment)


# ---------------------------------------------------------------------------
# parameter manifest and initialization


def _attn_names(prefix, c_q, c_kv, heads, with_bias_mlp, ppf_hidden):
    dh = c_q // heads
    names = {}
    for h in range(heads):
        names[f"{prefix}.q{h}.w"] = (c_q, dh)
        names[f"{prefix}.k{h}.w"] = (c_kv, dh)
        names[f"{prefix}.v{h}.w"] = (c_kv, dh)
    names[f"{prefix}.o.w"] = (c_q, c_q)
    names[f"{prefix}.o.b"] = (c_q,)
    if with_bias_mlp:
        names[f"{prefix}.pb1.w"] = (4, ppf_hidden)
        names[f"{prefix}.pb1.b"] = (ppf_hidden,)
        names[f"{prefix}.pb2.w"] = (ppf_hidden, heads)
        names[f"{prefix}.pb2.b"] = (heads,)
    return names


def _ffn_names(prefix, c, mult):
    return {
        f"{prefix}.f1.w": (c, mult * c), f"{prefix}.f1.b": (mult * c,),
        f"{prefix}.f2.w": (mult * c, c), f"{prefix}.f2.b": (c,),
    }


def _pal_names(prefix, c, cfg):
    names = _attn_names(f"{prefix}.attn", c, c, cfg.heads, True, cfg.ppf_hidden)
    names.update(_ffn_names(f"{prefix}.ffn", c, cfg.ffn_mult))
    return names


def _lft_names(prefix, cfg):
    names = {}
    for l in range(cfg.fusion_layers):
        names.update(_attn_names(f"{prefix}.l{l}.self", cfg.d, cfg.d, cfg.heads, False, 0))
        names.update(_ffn_names(f"{prefix}.l{l}.ffn_self", cfg.d, cfg.ffn_mult))
        names.update(_attn_names(f"{prefix}.l{l}.cross", cfg.d, cfg.d, cfg.heads, False, 0))
        names.update(_ffn_names(f"{prefix}.l{l}.ffn_cross", cfg.d, cfg.ffn_mult))
    return names


def _global_names(prefix, cfg):
    names = {}
    for b in range(cfg.global_blocks):
        names.update(_attn_names(f"{prefix}.b{b}.self", cfg.d, cfg.d, cfg.heads,
                                 True, cfg.ppf_hidden))
        names.update(_ffn_names(f"{prefix}.b{b}.ffn_self", cfg.d, cfg.ffn_mult))
        names.update(_attn_names(f"{prefix}.b{b}.cross", cfg.d, cfg.d, cfg.heads, False, 0))
        names.update(_ffn_names(f"{prefix}.b{b}.ffn_cross", cfg.d, cfg.ffn_mult))
    return names


def parameter_manifest(cfg: NetConfig) -> dict:
    """Every parameter name and shape the describe networks expect."""
    names = {}
    enc = cfg.encoder_dims
    dec = cfg.decoder_dims
    for side in ("cad", "depth"):
        for l, c_out in enumerate(enc):
            c_in = 1 if l == 0 else enc[l - 1]
            p = f"enc3d_{side}.b{l}"
            names[f"{p}.aal.ppf1.w"] = (4, cfg.ppf_hidden)
            names[f"{p}.aal.ppf1.b"] = (cfg.ppf_hidden,)
            names[f"{p}.aal.ppf2.w"] = (cfg.ppf_hidden, c_out)
            names[f"{p}.aal.ppf2.b"] = (c_out,)
            names[f"{p}.aal.feat.w"] = (c_in, c_out)
            names[f"{p}.aal.score.w"] = (c_out, 1)
            names.update(_pal_names(f"{p}.pal", c_out, cfg))
        for l, c_out in enumerate(dec):
            c_in = cfg.d if l == 0 else dec[l - 1]
            skip_dim = enc[len(enc) - 1 - l]
            p = f"dec3d_{side}.b{l}"
            names[f"{p}.up.w"] = (c_in, c_out)
            names[f"{p}.skip.w"] = (skip_dim, c_out)
            names.update(_pal_names(f"{p}.pal", c_out, cfg))
    cw = cfg.conv_widths
    chans = (3,) + cw
    for l in range(3):
        names[f"enc2d.conv{l}.w"] = (9 * chans[l], chans[l + 1])
        names[f"enc2d.conv{l}.b"] = (chans[l + 1],)
    names["enc2d.proj.w"] = (cw[2], cfg.d)
    names["enc2d.proj.b"] = (cfg.d,)
    for lft in ("k_from_q", "k_from_p", "p_from_k", "q_from_k"):
        names.update(_lft_names(f"fuse.lft_{lft}", cfg))
    names.update(_global_names("fuse.gt_3dto2d", cfg))
    names.update(_global_names("fuse.gt_2dto3d", cfg))
    names["match.slack"] = (1, 1)  # learned Sinkhorn slack score
    return names


def init_params(cfg: NetConfig, seed: int = 0) -> ParameterStore:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights, zero biases."""
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    for name, shape in parameter_manifest(cfg).items():
        if name == "match.slack":
            store.add(name, np.ones(shape))
        elif name.endswith(".b"):
            store.zeros(name, shape)
        else:
            store.init_uniform(name, shape, rng, fan_in=shape[0])
    return store


def zero_output_projections(params: ParameterStore) -> None:
    """Zero every attention output projection and FFN second layer in place.

    Makes all residual transformer blocks exact identity maps (test hook)."""
    for name in params.names():
        if name.endswith((".o.w", ".o.b", ".f2.w", ".f2.b")):
            params[name].data[...] = 0.0


# ---------------------------------------------------------------------------
# attention building blocks


def _linear_map(x, params, name):
    out = matmul(x, params[f"{name}.w"])
    if f"{name}.b" in params:
        out = add(out, params[f"{name}.b"])
    return out


def linear_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Kernelized attention with feature map elu(x)+1; O(N) in tokens."""
    fq, fk = elu1(q), elu1(k)
    kv = matmul(transpose(fk), v)
    num = matmul(fq, kv)
    ksum = reshape(sum_(fk, axis=0), (fk.shape[1], 1))
    den = matmul(fq, ksum)
    if (den.data <= 0.0).any():
        raise AssertionError("linear attention denominator must stay positive")
    return div(num, den)


def _softmax_attention(q, k, v, bias=None):
    dh = q.shape[1]
    logits = mul(matmul(q, transpose(k)), 1.0 / np.sqrt(dh))
    if bias is not None:
        logits = add(logits, bias)
    return matmul(softmax(logits, axis=-1), v)


def _ppf_bias_heads(params, prefix, ppf_flat, nq, nk, heads):
    # MLP on pair features -> one additive logit bias per head
    h = relu(add(matmul(Tensor(ppf_flat), params[f"{prefix}.pb1.w"]),
                 params[f"{prefix}.pb1.b"]))
    all_heads = add(matmul(h, params[f"{prefix}.pb2.w"]), params[f"{prefix}.pb2.b"])
    biases = []
    for hd in range(heads):
        onehot = np.zeros((heads, 1))
        onehot[hd, 0] = 1.0
        biases.append(reshape(matmul(all_heads, Tensor(onehot)), (nq, nk)))
    return biases


def _mha(x_q, x_kv, params, prefix, cfg, kind, ppf_flat=None, logit_mask=None):
    """Pre-norm residual multi-head attention updating ``x_q``."""
    hq = layer_norm(x_q)
    hk = hq if x_kv is x_q else layer_norm(x_kv)
    nq, nk = hq.shape[0], hk.shape[0]
    biases = None
    if ppf_flat is not None:
        biases = _ppf_bias_heads(params, prefix, ppf_flat, nq, nk, cfg.heads)
    outs = []
    for h in range(cfg.heads):
        q = matmul(hq, params[f"{prefix}.q{h}.w"])
        k = matmul(hk, params[f"{prefix}.k{h}.w"])
        v = matmul(hk, params[f"{prefix}.v{h}.w"])
        if kind == "linear":
            outs.append(linear_attention(q, k, v))
        else:
            bias = biases[h] if biases is not None else None
            if logit_mask is not None:
                bias = add(bias, logit_mask) if bias is not None else Tensor(logit_mask)
            outs.append(_softmax_attention(q, k, v, bias))
    o = concatenate(outs, axis=1)
    o = add(matmul(o, params[f"{prefix}.o.w"]), params[f"{prefix}.o.b"])
    return add(x_q, o)


def _ffn(x, params, prefix):
    h = layer_norm(x)
    h = relu(add(matmul(h, params[f"{prefix}.f1.w"]), params[f"{prefix}.f1.b"]))
    h = add(matmul(h, params[f"{prefix}.f2.w"]), params[f"{prefix}.f2.b"])
    return add(x, h)


def _pal(x, params, prefix, cfg, ppf_flat):
    """PPF-biased softmax self-attention plus feed-forward, both residual."""
    x = _mha(x, x, params, f"{prefix}.attn", cfg, "softmax", ppf_flat=ppf_flat)
    return _ffn(x, params, f"{prefix}.ffn")


# ---------------------------------------------------------------------------
# 3D encoder / decoder


def _aal(feats, level: Level3D, params, prefix, cfg):
    n_out, k = level.nbr_idx.shape
    ppf_emb = add(matmul(Tensor(level.aal_ppf), params[f"{prefix}.ppf1.w"]),
                  params[f"{prefix}.ppf1.b"])
    ppf_emb = add(matmul(relu(ppf_emb), params[f"{prefix}.ppf2.w"]),
                  params[f"{prefix}.ppf2.b"])
    nbr_feats = gather(feats, level.nbr_idx.reshape(-1))
    tok = add(ppf_emb, matmul(nbr_feats, params[f"{prefix}.feat.w"]))
    scores = reshape(matmul(tok, params[f"{prefix}.score.w"]), (n_out, k))
    weights = softmax(add(scores, level.nbr_mask), axis=-1)
    weighted = mul(tok, reshape(weights, (n_out * k, 1)))
    rows = np.repeat(np.arange(n_out, dtype=np.int64), k)
    return scatter_add(weighted, rows, n_out)


def encode_3d(cloud: PointCloud, params: ParameterStore, cfg: NetConfig,
              side: str = "cad", ctx: Context3D | None = None) -> SuperpointSet:
    """Hierarchical rotation-invariant encoder producing superpoint features."""
    if ctx is None:
        ctx = precompute_3d_context(cloud, cfg)
    feats = Tensor(np.ones((len(cloud), 1)))
    skips = []
    for l, level in enumerate(ctx.levels):
        p = f"enc3d_{side}.b{l}"
        feats = _aal(feats, level, params, f"{p}.aal", cfg)
        feats = _pal(feats, params, f"{p}.pal", cfg, level.pal_ppf)
        skips.append(feats)
    top = ctx.levels[-1]
    return SuperpointSet(coords=top.coords, normals=top.normals, features=feats,
                         assignment=ctx.dense_assignment, skips=skips, ctx=ctx)


def decode_3d(sp: SuperpointSet, params: ParameterStore, cfg: NetConfig,
              side: str = "cad") -> Tensor:
    """Upsample fused superpoint features back to dense per-point features."""
    if sp.ctx is None or len(sp.skips) != len(cfg.encoder_strides):
        raise ValueError("decode_3d needs the encoder context and skip features")
    levels = sp.ctx.levels
    feats = sp.features
    n_levels = len(levels)
    for l in range(n_levels):
        target = n_levels - 1 - l  # level the block outputs at
        p = f"dec3d_{side}.b{l}"
        if l == 0:
            up = matmul(feats, params[f"{p}.up.w"])
        else:
            parent = levels[target + 1].parent_of_prev
            up = matmul(gather(feats, parent), params[f"{p}.up.w"])
        feats = add(up, matmul(sp.skips[target], params[f"{p}.skip.w"]))
        feats = _pal(feats, params, f"{p}.pal", cfg, levels[target].pal_ppf)
    return center_tokens(feats)


# ---------------------------------------------------------------------------
# 2D encoder


_im2col_cache: dict = {}


def _im2col_indices(h, w):
    # stride-2 3x3 patches with zero padding 1; out-of-bounds -> row h*w (zeros)
    key = (h, w)
    if key in _im2col_cache:
        return _im2col_cache[key]
    oh, ow = h // 2, w // 2
    oi, oj = np.meshgrid(np.arange(oh), np.arange(ow), indexing="ij")
    rows = []
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            ii = 2 * oi + di
            jj = 2 * oj + dj
            ok = (ii >= 0) & (ii < h) & (jj >= 0) & (jj < w)
            flat = np.where(ok, ii * w + jj, h * w)
            rows.append(flat.reshape(-1))
    idx = np.stack(rows, axis=1).reshape(-1).astype(np.int64)  # (oh*ow*9,)
    _im2col_cache[key] = (idx, oh, ow)
    return _im2col_cache[key]


def _conv_block(x, h, w, params, name):
    # x: (h*w, c_in) -> (h/2 * w/2, c_out), conv + layer norm + relu
    c_in = x.shape[1]
    zero_row = Tensor(np.zeros((1, c_in)))
    padded = concatenate([x, zero_row], axis=0)
    idx, oh, ow = _im2col_indices(h, w)
    patches = reshape(gather(padded, idx), (oh * ow, 9 * c_in))
    out = add(matmul(patches, params[f"{name}.w"]), params[f"{name}.b"])
    return relu(layer_norm(out)), oh, ow


def encode_2d(crop: np.ndarray, params: ParameterStore, cfg: NetConfig) -> FeatureGrid:
    """Three stride-2 conv blocks then a 1x1 projection to dimension d."""
    h, w = crop.shape[:2]
    if h % 8 or w % 8:
        raise ValueError(f"crop size must be a multiple of 8, got {h}x{w}")
    x = Tensor(np.ascontiguousarray(crop.reshape(-1, 3)))
    for l in range(3):
        x, h, w = _conv_block(x, h, w, params, f"enc2d.conv{l}")
    x = add(matmul(x, params["enc2d.proj.w"]), params["enc2d.proj.b"])
    gi, gj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    centers = np.stack([(gj.reshape(-1) + 0.5) * 8, (gi.reshape(-1) + 0.5) * 8], axis=1)
    return FeatureGrid(features=x, grid_h=h, grid_w=w, pixel_centers=centers)


def sinusoidal_encoding_2d(grid_h: int, grid_w: int, d: int) -> np.ndarray:
    """Additive 2D positional code: first half of channels encodes the
    column, second half the row, each as interleaved sin/cos."""
    if d % 4 != 0:
        raise ValueError("d must be divisible by 4 for 2D sinusoidal encoding")
    half = d // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half // 2) / (half // 2))
    gi, gj = np.meshgrid(np.arange(grid_h), np.arange(grid_w), indexing="ij")

    def encode(pos):
        ang = pos.reshape(-1)[:, None] * freqs[None, :]
        out = np.empty((pos.size, half))
        out[:, 0::2] = np.sin(ang)
        out[:, 1::2] = np.cos(ang)
        return out

    return np.concatenate([encode(gj.astype(np.float64)), encode(gi.astype(np.float64))],
                          axis=1)


def positional_encoding_2d(grid: FeatureGrid) -> FeatureGrid:
    d = grid.features.shape[1]
    pe = sinusoidal_encoding_2d(grid.grid_h, grid.grid_w, d)
    return FeatureGrid(add(grid.features, Tensor(pe)), grid.grid_h, grid.grid_w,
                       grid.pixel_centers)


# ---------------------------------------------------------------------------
# fusion transformers


def center_tokens(t: Tensor) -> Tensor:
    """Subtract the across-token mean from every token.

    The residual stream accumulates a shared bias component that dwarfs the
    per-token signal after row normalization; removing it here keeps the
    matching heads well conditioned."""
    n = t.shape[0]
    mean_row = mul(matmul(Tensor(np.ones((1, n))), t), 1.0 / n)
    return sub(t, matmul(Tensor(np.ones((n, 1))), mean_row))


def latent_fusion_transformer(a: Tensor, b: Tensor, params: ParameterStore,
                              cfg: NetConfig, prefix: str) -> Tensor:
    """Stacked linear self- and cross-attention layers updating ``a`` from ``b``."""
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"token dims differ: {a.shape[1]} vs {b.shape[1]}")
    for l in range(cfg.fusion_layers):
        p = f"{prefix}.l{l}"
        a = _mha(a, a, params, f"{p}.self", cfg, "linear")
        a = _ffn(a, params, f"{p}.ffn_self")
        a = _mha(a, b, params, f"{p}.cross", cfg, "linear")
        a = _ffn(a, params, f"{p}.ffn_cross")
    return a


def global_transformer(fp: SuperpointSet, fq: SuperpointSet, params: ParameterStore,
                       cfg: NetConfig, prefix: str):
    """Cross-cloud context aggregation with shared weights for both sets.

    Each block runs PPF-biased self-attention inside each cloud, then
    cross-attention between the clouds."""
    a, b = fp.features, fq.features
    ppf_a = fp.ctx.levels[-1].pal_ppf if fp.ctx is not None else ppf_pairs(
        fp.coords, fp.normals, fp.coords, fp.normals).reshape(-1, 4)
    ppf_b = fq.ctx.levels[-1].pal_ppf if fq.ctx is not None else ppf_pairs(
        fq.coords, fq.normals, fq.coords, fq.normals).reshape(-1, 4)
    for blk in range(cfg.global_blocks):
        p = f"{prefix}.b{blk}"
        a = _mha(a, a, params, f"{p}.self", cfg, "softmax", ppf_flat=ppf_a)
        b = _mha(b, b, params, f"{p}.self", cfg, "softmax", ppf_flat=ppf_b)
        a = _ffn(a, params, f"{p}.ffn_self")
        b = _ffn(b, params, f"{p}.ffn_self")
        a2 = _mha(a, b, params, f"{p}.cross", cfg, "softmax")
        b2 = _mha(b, a, params, f"{p}.cross", cfg, "softmax")
        a = _ffn(a2, params, f"{p}.ffn_cross")
        b = _ffn(b2, params, f"{p}.ffn_cross")
    return fp.with_features(a), fq.with_features(b)


def fuse(sp_p: SuperpointSet, sp_q: SuperpointSet, grid_k: FeatureGrid,
         params: ParameterStore, cfg: NetConfig):
    """Latent fusion of CAD/depth superpoint features with superpixel features.

    3D-to-2D: a global transformer aggregates the two clouds, then the RGB
    tokens are updated from depth then CAD. 2D-to-3D: each cloud is updated
    from the fused RGB tokens, then a second global transformer co-injects
    cross-cloud context. Returns (fused P, fused Q, fused K)."""
    p1, q1 = global_transformer(sp_p, sp_q, params, cfg, "fuse.gt_3dto2d")
    k = latent_fusion_transformer(grid_k.features, q1.features, params, cfg,
                                  "fuse.lft_k_from_q")
    k = latent_fusion_transformer(k, p1.features, params, cfg, "fuse.lft_k_from_p")
    p2 = latent_fusion_transformer(sp_p.features, k, params, cfg, "fuse.lft_p_from_k")
    q2 = latent_fusion_transformer(sp_q.features, k, params, cfg, "fuse.lft_q_from_k")
    p3, q3 = global_transformer(sp_p.with_features(p2), sp_q.with_features(q2),
                                params, cfg, "fuse.gt_2dto3d")
    grid_out = FeatureGrid(center_tokens(k), grid_k.grid_h, grid_k.grid_w,
                           grid_k.pixel_centers)
    return (p3.with_features(center_tokens(p3.features)),
            q3.with_features(center_tokens(q3.features)), grid_out)
