"""Learnable components.

Tensor layout conventions (torch, channels first):

* images        (B, N, 3, H, W)
* PV features   (B, N, C_F, H/down, W/down)
* BEV features  (B, C_B, X_B, Y_B), rows along world x, columns along world y
* BEV input     (B, 1 + |C|, X_o, Y_o) as [height; semantics]
* PV logits     (B, N, |C|, H, W)
* camera params K, R (B, N, 3, 3), T (B, N, 3)

Every module works in float32 or float64 (``module.double()``); geometry is
always evaluated in float64 and cast to the feature dtype.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .geometry import GridSpec, make_bev_grid

VT_VARIANTS = ("cross_attention", "lift_splat")
IVT_BRANCHES = ("dual", "single")
N_FREQ = 4
FRONT_EPS = 1e-6


@dataclass
class NetConfig:
    grid: GridSpec = field(default_factory=GridSpec)
    s: int = 2
    image_size: tuple[int, int] = (112, 224)
    n_cams: int = 4
    n_classes: int = 3
    down: int = 8
    feat_channels: int = 64
    dim: int = 64
    heads: int = 4
    vt_layers: int = 2
    ivt_layers: int = 2
    depth_bins: int = 32
    depth_range: tuple[float, float] = (1.0, 35.0)
    vt_variant: str = "cross_attention"
    ivt_branch: str = "dual"
    ae_noise_std: float = 0.1

    def __post_init__(self):
        if self.vt_variant not in VT_VARIANTS:
            raise ValueError(f"unknown vt_variant {self.vt_variant!r}; expected one of {VT_VARIANTS}")
        if self.ivt_branch not in IVT_BRANCHES:
            raise ValueError(f"unknown ivt_branch {self.ivt_branch!r}; expected one of {IVT_BRANCHES}")
        h, w = self.image_size
        if h % self.down or w % self.down:
            raise ValueError(f"image size {h}x{w} not divisible by stride {self.down}")
        if self.dim % self.heads:
            raise ValueError("dim must be divisible by heads")
        self.grid.shape_at(self.s + 2)  # the IVT encoder needs two more halvings

    @property
    def bev_shape(self) -> tuple[int, int]:
        return self.grid.shape_at(self.s)

    @property
    def feat_shape(self) -> tuple[int, int]:
        return self.image_size[0] // self.down, self.image_size[1] // self.down

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = self.grid.to_dict()
        d["image_size"] = list(self.image_size)
        d["depth_range"] = list(self.depth_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        d = dict(d)
        d["grid"] = GridSpec.from_dict(d["grid"])
        d["image_size"] = tuple(d["image_size"])
        d["depth_range"] = tuple(d["depth_range"])
        return cls(**d)

    def arch_dict(self, part: str) -> dict:
        """The fields that determine the parameter shapes of ``part``."""
        d = self.to_dict()
        keep = {
            "vt": ["grid", "s", "image_size", "n_classes", "down", "feat_channels", "dim",
                   "heads", "vt_layers", "depth_bins", "depth_range", "vt_variant"],
            "ivt": ["grid", "s", "image_size", "n_cams", "n_classes", "down", "dim", "heads",
                    "ivt_layers", "ivt_branch"],
            "ae": ["grid", "s", "n_classes", "dim"],
        }[part]
        return {"part": part, **{k: d[k] for k in keep}}


# --- geometry helpers ----------------------------------------------------------


def project_points(points: torch.Tensor, K: torch.Tensor, R: torch.Tensor, T: torch.Tensor,
                   image_size: tuple[int, int]) -> tuple[torch.Tensor, torch.Tensor]:
    """Project world points (L, 3) into every camera.

    Returns normalized (u/W, v/H) of shape (B, N, L, 2) and a validity mask
    (B, N, L): in front of the camera and inside the image.
    """
    h, w = image_size
    pts = points.to(torch.float64)
    K, R, T = K.to(torch.float64), R.to(torch.float64), T.to(torch.float64)
    cam = torch.einsum("bnij,bnlj->bnli", R, pts[None, None] - T[:, :, None])
    hom = torch.einsum("bnij,bnlj->bnli", K, cam)
    depth = hom[..., 2]
    front = depth > FRONT_EPS
    safe = torch.where(front, depth, torch.ones_like(depth))
    uv = hom[..., :2] / safe[..., None]
    uv = uv / torch.tensor([w, h], dtype=torch.float64)
    valid = front & (uv[..., 0] >= 0) & (uv[..., 0] < 1) & (uv[..., 1] >= 0) & (uv[..., 1] < 1)
    uv = torch.where(valid[..., None], uv, torch.zeros_like(uv))
    return uv, valid


def fourier(x: torch.Tensor, n_freq: int = N_FREQ) -> torch.Tensor:
    freqs = (2.0 ** torch.arange(n_freq, dtype=x.dtype)) * math.pi
    ang = x[..., None] * freqs
    return torch.cat([x, ang.sin().flatten(-2), ang.cos().flatten(-2)], dim=-1)


def fourier_dim(d: int, n_freq: int = N_FREQ) -> int:
    return d * (1 + 2 * n_freq)


class PosMLP(nn.Module):
    """2-layer MLP over Fourier features of normalized coordinates."""

    def __init__(self, in_dim: int, dim: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(fourier_dim(in_dim), dim), nn.ReLU(), nn.Linear(dim, dim))

    def forward(self, coords):
        return self.net(fourier(coords))


class ProjectedEmbedding(nn.Module):
    """Camera-aware embedding of world points: MLP of their projection, or a
    learned sentinel where the projection falls off the image."""

    def __init__(self, dim: int, image_size: tuple[int, int]):
        super().__init__()
        self.image_size = tuple(image_size)
        self.mlp = PosMLP(2, dim)
        self.sentinel = nn.Parameter(torch.randn(dim) * 0.1)

    def forward(self, points, K, R, T):
        uv, valid = project_points(points, K, R, T, self.image_size)
        emb = self.mlp(uv.to(self.sentinel.dtype))
        return torch.where(valid[..., None], emb, self.sentinel)


def pixel_coords(h: int, w: int, dtype=torch.float64) -> torch.Tensor:
    """Normalized pixel-centre coordinates (h*w, 2), row-major."""
    v = (torch.arange(h, dtype=dtype) + 0.5) / h
    u = (torch.arange(w, dtype=dtype) + 0.5) / w
    gv, gu = torch.meshgrid(v, u, indexing="ij")
    return torch.stack([gu.reshape(-1), gv.reshape(-1)], dim=1)


# --- attention -----------------------------------------------------------------


def attend(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Scaled dot-product attention, softmax over the key axis.

    q (..., Lq, h, d), k/v (..., Lk, h, d) -> (..., Lq, h, d).
    """
    logits = torch.einsum("...qhd,...khd->...hqk", q, k) / math.sqrt(q.shape[-1])
    return torch.einsum("...hqk,...khd->...qhd", logits.softmax(dim=-1), v)


def attend_cameras(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Attention with camera-specific queries and one softmax over all cameras' keys.

    q (B, N, Lq, h, d), k/v (B, N, Lk, h, d) -> (B, Lq, h, d).
    """
    b, n, lq, h, d = q.shape
    lk = k.shape[2]
    logits = torch.einsum("bnqhd,bnkhd->bhqnk", q, k) / math.sqrt(d)
    attn = logits.reshape(b, h, lq, n * lk).softmax(dim=-1).reshape(b, h, lq, n, lk)
    return torch.einsum("bhqnk,bnkhd->bqhd", attn, v)


class CrossAttentionLayer(nn.Module):
    """Pre-norm cross-attention block followed by an MLP.

    ``joint_cameras`` selects one softmax across all cameras (BEV queries
    gathering from every view) instead of per-camera attention.
    """

    def __init__(self, dim: int, heads: int, joint_cameras: bool):
        super().__init__()
        self.heads = heads
        self.joint = joint_cameras
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.to_q = nn.Linear(dim, dim)
        self.to_k = nn.Linear(dim, dim)
        self.to_v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)
        self.norm_mlp = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))

    def _split(self, x):
        return x.reshape(*x.shape[:-1], self.heads, x.shape[-1] // self.heads)

    def forward(self, query, query_pos, key, key_pos, value):
        """query (..., Lq, D) broadcast against query_pos; key/value (..., Lk, D).

        In joint-camera mode ``query`` is (B, Lq, D) and ``query_pos`` (B, N, Lq, D).
        """
        qn = self.norm_q(query)
        if self.joint:
            qn = qn[:, None]
        q = self._split(self.to_q(qn + query_pos))
        kv = self.norm_kv(key)
        k = self._split(self.to_k(kv + key_pos))
        v = self._split(self.to_v(self.norm_kv(value) if value is not key else kv))
        if self.joint:
            out = attend_cameras(q, k, v)
        else:
            out = attend(q, k, v)
        out = self.proj(out.flatten(-2))
        x = query + out
        return x + self.mlp(self.norm_mlp(x))


# --- PV backbone ---------------------------------------------------------------


class Backbone(nn.Module):
    """Four conv blocks, the first three strided: total stride 8."""

    def __init__(self, out_channels: int = 64, down: int = 8):
        super().__init__()
        if down != 8:
            raise ValueError("the backbone has a fixed stride of 8")
        widths = (16, 32, out_channels)
        layers, c_in = [], 3
        for c in widths:
            layers += [nn.Conv2d(c_in, c, 3, stride=2, padding=1), nn.ReLU()]
            c_in = c
        layers += [nn.Conv2d(c_in, out_channels, 3, padding=1)]
        self.net = nn.Sequential(*layers)
        self.down = down

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        b, n, c, h, w = images.shape
        if h % self.down or w % self.down:
            raise ValueError(f"image size {h}x{w} not divisible by stride {self.down}")
        feats = self.net(images.reshape(b * n, c, h, w))
        return feats.reshape(b, n, *feats.shape[1:])


# --- view transformers -----------------------------------------------------------


class BevRefine(nn.Module):
    def __init__(self, c_in: int, dim: int):
        super().__init__()
        self.inp = nn.Conv2d(c_in, dim, 1)
        self.body = nn.Sequential(nn.Conv2d(dim, dim, 3, padding=1), nn.ReLU(),
                                  nn.Conv2d(dim, dim, 3, padding=1))

    def forward(self, x):
        x = self.inp(x)
        return x + self.body(x)


class CrossAttentionVT(nn.Module):
    """Learned per-cell BEV queries attending over every camera's features."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        xb, yb = cfg.bev_shape
        self.bev_shape = (xb, yb)
        self.register_buffer("bev_points", torch.from_numpy(make_bev_grid(cfg.grid, cfg.s)),
                             persistent=False)
        self.queries = nn.Parameter(torch.randn(xb * yb, cfg.dim) * 0.1)
        self.bev_pos = ProjectedEmbedding(cfg.dim, cfg.image_size)
        self.pix_pos = PosMLP(2, cfg.dim)
        self.key_in = nn.Linear(cfg.feat_channels, cfg.dim)
        self.layers = nn.ModuleList(
            CrossAttentionLayer(cfg.dim, cfg.heads, joint_cameras=True) for _ in range(cfg.vt_layers)
        )
        self.refine = BevRefine(cfg.dim, cfg.dim)

    def forward(self, feats, K, R, T):
        b, n, c, hf, wf = feats.shape
        if K.shape[:2] != (b, n):
            raise ValueError(f"rig has {tuple(K.shape[:2])} cameras, features {(b, n)}")
        dtype = self.queries.dtype
        qpos = self.bev_pos(self.bev_points, K, R, T)                       # (B,N,L,D)
        tokens = self.key_in(feats.flatten(3).transpose(2, 3))               # (B,N,M,D)
        kpos = self.pix_pos(pixel_coords(hf, wf).to(dtype))                  # (M,D)
        x = self.queries.expand(b, -1, -1)
        for layer in self.layers:
            x = layer(x, qpos, tokens, kpos, tokens)
        x = x.transpose(1, 2).reshape(b, -1, *self.bev_shape)
        return self.refine(x)


def frustum_points(K, R, T, feat_hw, down, depths) -> torch.Tensor:
    """World points x = T + d * R^T K^-1 (u, v, 1) for every feature pixel and depth.

    Returns (B, N, D, h, w, 3) in float64.
    """
    h, w = feat_hw
    K, R, T = K.to(torch.float64), R.to(torch.float64), T.to(torch.float64)
    v = (torch.arange(h, dtype=torch.float64) + 0.5) * down
    u = (torch.arange(w, dtype=torch.float64) + 0.5) * down
    gv, gu = torch.meshgrid(v, u, indexing="ij")
    pix = torch.stack([gu, gv, torch.ones_like(gu)], dim=-1).reshape(-1, 3)   # (M,3)
    rays = torch.einsum("bnij,mj->bnmi", torch.linalg.inv(K), pix)
    rays = torch.einsum("bnji,bnmj->bnmi", R, rays)                           # R^T
    pts = T[:, :, None, None] + depths.to(torch.float64)[:, None, None] * rays[:, :, None]
    return pts.reshape(*pts.shape[:2], len(depths), h, w, 3)


def splat(depth_probs: torch.Tensor, context: torch.Tensor, K, R, T, grid: GridSpec, s: int,
          down: int, depths: torch.Tensor) -> torch.Tensor:
    """Lift ``context`` (B,N,C,h,w) with ``depth_probs`` (B,N,D,h,w) and sum into BEV cells.

    Returns (B, C, X_B, Y_B).  Points outside the grid are dropped.
    """
    b, n, c, h, w = context.shape
    xb, yb = grid.shape_at(s)
    pts = frustum_points(K, R, T, (h, w), down, depths)
    dx, dy = grid.extent_x / xb, grid.extent_y / yb
    i = torch.floor((pts[..., 0] + grid.extent_x / 2.0) / dx).long()
    j = torch.floor((pts[..., 1] + grid.extent_y / 2.0) / dy).long()
    inside = (i >= 0) & (i < xb) & (j >= 0) & (j < yb)
    flat = (torch.arange(b).reshape(b, 1, 1, 1, 1) * (xb * yb) + i * yb + j)[inside]
    vals = depth_probs[:, :, :, None] * context[:, :, None]                  # (B,N,D,C,h,w)
    vals = vals.permute(0, 1, 2, 4, 5, 3)[inside]                            # (P,C)
    out = torch.zeros(b * xb * yb, c, dtype=context.dtype)
    out = out.index_add(0, flat, vals)
    return out.reshape(b, xb, yb, c).permute(0, 3, 1, 2)


class LiftSplatVT(nn.Module):
    """Categorical per-pixel depth, outer-product lift, sum-splat onto the BEV grid."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        lo, hi = cfg.depth_range
        step = (hi - lo) / cfg.depth_bins
        self.register_buffer("depths", lo + step * (torch.arange(cfg.depth_bins, dtype=torch.float64) + 0.5),
                             persistent=False)
        self.head = nn.Conv2d(cfg.feat_channels, cfg.depth_bins + cfg.dim, 1)
        self.refine = BevRefine(cfg.dim, cfg.dim)

    def forward(self, feats, K, R, T):
        b, n, c, hf, wf = feats.shape
        if K.shape[:2] != (b, n):
            raise ValueError(f"rig has {tuple(K.shape[:2])} cameras, features {(b, n)}")
        out = self.head(feats.reshape(b * n, c, hf, wf)).reshape(b, n, -1, hf, wf)
        probs = out[:, :, :self.cfg.depth_bins].softmax(dim=2)
        ctx = out[:, :, self.cfg.depth_bins:]
        bev = splat(probs, ctx, K, R, T, self.cfg.grid, self.cfg.s, self.cfg.down, self.depths)
        return self.refine(bev)


def make_vt(cfg: NetConfig) -> nn.Module:
    if cfg.vt_variant == "cross_attention":
        return CrossAttentionVT(cfg)
    if cfg.vt_variant == "lift_splat":
        return LiftSplatVT(cfg)
    raise ValueError(f"unknown vt_variant {cfg.vt_variant!r}")


# --- BEV decoder -----------------------------------------------------------------


def _up_stack(c_in: int, widths: list[int]) -> nn.ModuleList:
    mods = nn.ModuleList()
    for c in widths:
        mods.append(nn.Sequential(nn.Conv2d(c_in, c, 3, padding=1), nn.ReLU()))
        c_in = c
    return mods


class BevDecoder(nn.Module):
    """Two sub-decoders upsampling by 2^s: semantic logits and a [0,1] height map."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.out_shape = (cfg.grid.nx, cfg.grid.ny)
        widths = [max(16, cfg.dim // 2 ** (k + 1)) for k in range(cfg.s)]
        self.sem = _up_stack(cfg.dim, widths)
        self.sem_out = nn.Conv2d(widths[-1] if widths else cfg.dim, cfg.n_classes, 1)
        self.hgt = _up_stack(cfg.dim, widths)
        self.hgt_out = nn.Conv2d(widths[-1] if widths else cfg.dim, 1, 1)

    def _run(self, x, stack, head):
        for k, block in enumerate(stack):
            if k == len(stack) - 1:
                size = self.out_shape
            else:
                size = (x.shape[-2] * 2, x.shape[-1] * 2)
            x = block(F.interpolate(x, size=size, mode="bilinear", align_corners=False))
        if x.shape[-2:] != self.out_shape:
            x = F.interpolate(x, size=self.out_shape, mode="bilinear", align_corners=False)
        return head(x)

    def semantic(self, bev):
        return self._run(bev, self.sem, self.sem_out)

    def height(self, bev):
        return torch.sigmoid(self._run(bev, self.hgt, self.hgt_out))

    def forward(self, bev):
        return self.semantic(bev), self.height(bev)


class BevModel(nn.Module):
    """Backbone + VT + dual-head decoder.  ``predict`` is the inference path."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = Backbone(cfg.feat_channels, cfg.down)
        self.vt = make_vt(cfg)
        self.decoder = BevDecoder(cfg)

    def encode(self, images, K, R, T):
        feats = self.backbone(images)
        return feats, self.vt(feats, K, R, T)

    def forward(self, images, K, R, T) -> dict:
        feats, bev = self.encode(images, K, R, T)
        logits, height = self.decoder(bev)
        return {"feats": feats, "bev": bev, "logits": logits, "height": height}

    @torch.no_grad()
    def predict(self, images, K, R, T) -> torch.Tensor:
        """BEV class probabilities; the height head is not evaluated."""
        _, bev = self.encode(images, K, R, T)
        return torch.sigmoid(self.decoder.semantic(bev))


# --- IVT -------------------------------------------------------------------------


class ResDown(nn.Module):
    """conv-norm-pool-relu with a pooled 1x1 skip; halves the resolution."""

    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.norm = nn.GroupNorm(8, c_out)
        self.skip = nn.Conv2d(c_in, c_out, 1)

    def forward(self, x):
        main = F.max_pool2d(self.norm(self.conv(x)), 2)
        return F.relu(main + F.max_pool2d(self.skip(x), 2))


class BevEncoder(nn.Module):
    """Stem downsampling by 2^s then three residual down-blocks.

    Returns three scales: X_B, X_B/2, X_B/4 (floor), all with ``dim`` channels.
    """

    def __init__(self, c_in: int, dim: int, s: int):
        super().__init__()
        stem, c = [], c_in
        for _ in range(max(s - 1, 0)):
            stem += [nn.Conv2d(c, dim // 2, 3, stride=2, padding=1), nn.ReLU()]
            c = dim // 2
        if s == 0:
            stem += [nn.Conv2d(c, dim // 2, 3, padding=1), nn.ReLU()]
            c = dim // 2
        self.stem = nn.Sequential(*stem)
        # with s == 0 the first block would halve X_B; upsample back instead
        self.keep_first = s == 0
        self.blocks = nn.ModuleList([ResDown(c, dim), ResDown(dim, dim), ResDown(dim, dim)])

    def forward(self, x) -> list[torch.Tensor]:
        x = self.stem(x)
        size = x.shape[-2:]
        out = []
        for block in self.blocks:
            x = block(x)
            out.append(x)
        if self.keep_first:
            out[0] = F.interpolate(out[0], size=size, mode="bilinear", align_corners=False)
        return out


class IvtBranch(nn.Module):
    """PV queries attend to BEV tokens of the given scales.

    ``progressive`` runs one layer per scale in order; otherwise every layer
    attends to the concatenation of all scales.
    """

    def __init__(self, cfg: NetConfig, scales: tuple[int, ...], progressive: bool):
        super().__init__()
        self.scales = scales
        self.progressive = progressive
        n_layers = len(scales) if progressive else cfg.ivt_layers
        self.layers = nn.ModuleList(
            CrossAttentionLayer(cfg.dim, cfg.heads, joint_cameras=False) for _ in range(n_layers)
        )

    def forward(self, queries, qpos, tokens: list, kpos: list):
        """queries (B,N,M,D); tokens[s] (B,1,L_s,D); kpos[s] (B,N,L_s,D)."""
        x = queries
        if self.progressive:
            for layer, sc in zip(self.layers, self.scales):
                x = layer(x, qpos, tokens[sc], kpos[sc], tokens[sc])
            return x
        tok = torch.cat([tokens[sc] for sc in self.scales], dim=2)
        pos = torch.cat([kpos[sc] for sc in self.scales], dim=2)
        for layer in self.layers:
            x = layer(x, qpos, tok, pos, tok)
        return x


class IvtNet(nn.Module):
    """[H;O] BEV map -> per-camera PV segmentation logits, plus the MR features."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        self.in_channels = cfg.n_classes + 1
        self.encoder = BevEncoder(self.in_channels, cfg.dim, cfg.s)
        hq, wq = cfg.feat_shape
        self.feat_shape = (hq, wq)
        self.pv_queries = nn.Parameter(
            nn.init.trunc_normal_(torch.empty(cfg.n_cams, hq * wq, cfg.dim), std=1.0, a=-2.0, b=2.0)
        )
        self.pix_pos = PosMLP(2, cfg.dim)
        self.bev_pos = ProjectedEmbedding(cfg.dim, cfg.image_size)
        self.scale_embed = nn.Parameter(torch.randn(3, cfg.dim) * 0.1)
        for sc in range(3):
            self.register_buffer(f"points{sc}",
                                 torch.from_numpy(make_bev_grid(cfg.grid, cfg.s + sc)), persistent=False)
        if cfg.ivt_branch == "dual":
            self.branches = nn.ModuleList([IvtBranch(cfg, (0, 1), False), IvtBranch(cfg, (1, 2), False)])
            self.fuse = nn.Conv2d(2 * cfg.dim, cfg.dim, 1)
        else:
            self.branches = nn.ModuleList([IvtBranch(cfg, (2, 1, 0), True)])
            self.fuse = nn.Identity()
        self.decoder = nn.Sequential(
            nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False),
            nn.Conv2d(cfg.dim, 32, 3, padding=1), nn.ReLU(),
            nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False),
            nn.Conv2d(32, 16, 3, padding=1), nn.ReLU(),
            nn.Conv2d(16, cfg.n_classes, 1),
            nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False),
        )

    def forward(self, bev_input, K, R, T) -> tuple[torch.Tensor, list[torch.Tensor]]:
        if bev_input.shape[1] != self.in_channels:
            raise ValueError(f"IVT expects {self.in_channels} input channels, got {bev_input.shape[1]}")
        b = bev_input.shape[0]
        n = self.cfg.n_cams
        if K.shape[:2] != (b, n):
            raise ValueError(f"rig shape {tuple(K.shape[:2])} does not match batch {b} x {n} cameras")
        mr = self.encoder(bev_input)
        tokens, kpos = [], []
        for sc, feat in enumerate(mr):
            tokens.append(feat.flatten(2).transpose(1, 2)[:, None])
            pts = getattr(self, f"points{sc}")
            kpos.append(self.bev_pos(pts, K, R, T) + self.scale_embed[sc])
        hq, wq = self.feat_shape
        qpos = self.pix_pos(pixel_coords(hq, wq).to(self.pv_queries.dtype))
        queries = self.pv_queries.expand(b, -1, -1, -1)
        outs = [br(queries, qpos, tokens, kpos) for br in self.branches]
        x = torch.cat(outs, dim=-1)                                            # (B,N,M,D*)
        x = x.transpose(2, 3).reshape(b * n, -1, hq, wq)
        x = self.fuse(x)
        logits = self.decoder(x)
        h, w = self.cfg.image_size
        if logits.shape[-2:] != (h, w):
            logits = F.interpolate(logits, size=(h, w), mode="bilinear", align_corners=False)
        return logits.reshape(b, n, -1, h, w), mr


# --- FPN neck --------------------------------------------------------------------


class FpnNeck(nn.Module):
    """Top-down pathway with 1x1 lateral connections, output at a target size."""

    def __init__(self, dim: int, n_scales: int = 3):
        super().__init__()
        self.lateral = nn.ModuleList(nn.Conv2d(dim, dim, 1) for _ in range(n_scales))

    def forward(self, mr: list[torch.Tensor], target_hw: tuple[int, int]) -> torch.Tensor:
        th, tw = target_hw
        usable = [k for k, f in enumerate(mr) if f.shape[-2] <= th and f.shape[-1] <= tw]
        if not usable:
            raise ValueError(f"no feature scale at or below the target size {th}x{tw}")
        if len(mr) > len(self.lateral):
            raise ValueError(f"FPN built for {len(self.lateral)} scales, got {len(mr)}")
        p = None
        for k in sorted(usable, key=lambda k: mr[k].shape[-2]):
            lat = self.lateral[k](mr[k])
            if p is None:
                p = lat
            else:
                p = lat + F.interpolate(p, size=lat.shape[-2:], mode="nearest")
        if p.shape[-2:] != (th, tw):
            p = F.interpolate(p, size=(th, tw), mode="bilinear", align_corners=False)
        return p


# --- auto-encoder baseline ---------------------------------------------------------


class BevAutoencoder(nn.Module):
    """Encoder shared in design with the IVT's CNN encoder, skip-connected decoder."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        self.in_channels = cfg.n_classes + 1
        d = cfg.dim
        self.encoder = BevEncoder(self.in_channels, d, cfg.s)
        self.up2 = nn.ConvTranspose2d(d, d, 2, stride=2)
        self.up1 = nn.ConvTranspose2d(d, d, 2, stride=2)
        self.mix1 = nn.Sequential(nn.Conv2d(2 * d, d, 3, padding=1), nn.ReLU())
        self.mix0 = nn.Sequential(nn.Conv2d(2 * d, d, 3, padding=1), nn.ReLU())
        self.head = nn.Sequential(nn.Conv2d(d, d // 2, 3, padding=1), nn.ReLU(),
                                  nn.Conv2d(d // 2, self.in_channels, 1))

    @staticmethod
    def _match(x, ref):
        if x.shape[-2:] != ref.shape[-2:]:
            x = F.interpolate(x, size=ref.shape[-2:], mode="bilinear", align_corners=False)
        return x

    def forward(self, bev_input, noise_seed: int | None = None):
        """Returns (recon, mr); recon channel 0 is height in [0,1], the rest are logits."""
        if bev_input.shape[1] != self.in_channels:
            raise ValueError(f"autoencoder expects {self.in_channels} channels, got {bev_input.shape[1]}")
        mr = self.encoder(bev_input)
        if noise_seed is not None:
            gen = torch.Generator().manual_seed(int(noise_seed))
            noise = torch.randn(mr[2].shape, generator=gen, dtype=mr[2].dtype)
            mr = [mr[0], mr[1], mr[2] + self.cfg.ae_noise_std * noise]
        x = self._match(self.up2(mr[2]), mr[1])
        x = self.mix1(torch.cat([x, mr[1]], dim=1))
        x = self._match(self.up1(x), mr[0])
        x = self.mix0(torch.cat([x, mr[0]], dim=1))
        x = F.interpolate(x, size=bev_input.shape[-2:], mode="bilinear", align_corners=False)
        out = self.head(x)
        recon = torch.cat([torch.sigmoid(out[:, :1]), out[:, 1:]], dim=1)
        return recon, mr


# --- feature-cycle baseline ----------------------------------------------------------


class PvFeatureReconstructor(nn.Module):
    """BEV features -> PV feature maps via per-camera query cross-attention."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        hq, wq = cfg.feat_shape
        self.feat_shape = (hq, wq)
        self.queries = nn.Parameter(torch.randn(hq * wq, cfg.dim) * 0.1)
        self.pix_pos = PosMLP(2, cfg.dim)
        self.bev_pos = ProjectedEmbedding(cfg.dim, cfg.image_size)
        self.register_buffer("bev_points", torch.from_numpy(make_bev_grid(cfg.grid, cfg.s)),
                             persistent=False)
        self.layers = nn.ModuleList(
            CrossAttentionLayer(cfg.dim, cfg.heads, joint_cameras=False) for _ in range(2)
        )
        self.out = nn.Linear(cfg.dim, cfg.feat_channels)

    def forward(self, bev, K, R, T):
        b, n = K.shape[:2]
        hq, wq = self.feat_shape
        tokens = bev.flatten(2).transpose(1, 2)[:, None]
        kpos = self.bev_pos(self.bev_points, K, R, T)
        qpos = self.pix_pos(pixel_coords(hq, wq).to(self.queries.dtype))
        x = self.queries.expand(b, n, -1, -1)
        for layer in self.layers:
            x = layer(x, qpos, tokens, kpos, tokens)
        x = self.out(x)
        return x.transpose(2, 3).reshape(b, n, -1, hq, wq)


# --- utilities -----------------------------------------------------------------------


def bev_input(height: torch.Tensor, semantics: torch.Tensor) -> torch.Tensor:
    """Stack (B,1,X,Y) heights and (B,C,X,Y) semantics into [H;O]."""
    return torch.cat([height, semantics], dim=1)


def parameter_shapes(module: nn.Module) -> dict[str, tuple[int, ...]]:
    return {k: tuple(p.shape) for k, p in module.named_parameters()}


def build(kind: str, cfg: NetConfig, seed: int) -> nn.Module:
    """Instantiate a network from an explicit seed (re-instantiation is identical)."""
    torch.manual_seed(seed)
    cls = {"bev": BevModel, "ivt": IvtNet, "ae": BevAutoencoder,
           "fpn": lambda c: FpnNeck(c.dim), "feat_recon": PvFeatureReconstructor}[kind]
    return cls(cfg)
