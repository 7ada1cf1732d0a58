"""Fusion pyramid depth network.

Encoder halves resolution per level; every level is then augmented with
coordinate channels and fused with its neighbour levels (reshaped to the
level's extents) before decoding. Disparity comes out at 4 scales through
sigmoid heads scaled by d_max; when refinement is enabled the three finest
scales are produced by residual sub-pixel refinement instead of direct
heads. Includes the flat binary checkpoint format ("FDPT1").
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad


class ConfigError(ValueError):
    """Invalid architecture or training configuration."""


@dataclass
class ArchConfig:
    num_levels: int = 5
    widths: tuple = (16, 32, 64, 128, 256)
    kernel_size: int = 3
    reservation: float = 0.5
    coordconv_enabled: bool = True
    fusion_enabled: bool = True
    refinement_enabled: bool = True
    d_max: float = 0.3

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.num_levels < 3:
            raise ConfigError(f"need at least 3 levels, got {self.num_levels}")
        if len(self.widths) != self.num_levels:
            raise ConfigError(
                f"widths has {len(self.widths)} entries for {self.num_levels} levels"
            )
        if any(w < 1 for w in self.widths):
            raise ConfigError(f"channel widths must be positive: {self.widths}")
        if self.kernel_size % 2 == 0 or self.kernel_size < 1:
            raise ConfigError(f"kernel size must be odd, got {self.kernel_size}")
        if not 0.0 < self.reservation < 1.0:
            raise ConfigError(f"reservation ratio must lie in (0, 1), got {self.reservation}")
        if self.d_max <= 0.0:
            raise ConfigError(f"d_max must be positive, got {self.d_max}")


# ---------------------------------------------------------------------------
# coordinate channels


_coord_cache = {}


def coord_channels(height, width, center=None):
    """The three hard-coded channels: row ramp, column ramp, radius.

    Ramps span [-1, 1]; the radius sqrt((i - ci)^2 + (j - cj)^2) is measured
    from `center` (default (h/2, w/2)) and normalized by the largest corner
    radius so it lands in [0, 1]. Returns a cached (1, 3, h, w) array.
    """
    ci, cj = (height / 2.0, width / 2.0) if center is None else (float(center[0]), float(center[1]))
    key = (height, width, ci, cj)
    cached = _coord_cache.get(key)
    if cached is not None:
        return cached
    rows = np.linspace(-1.0, 1.0, height) if height > 1 else np.zeros(1)
    cols = np.linspace(-1.0, 1.0, width) if width > 1 else np.zeros(1)
    ii, jj = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    radius = np.sqrt((ii - ci) ** 2 + (jj - cj) ** 2)
    corners = [(0.0, 0.0), (0.0, width - 1.0), (height - 1.0, 0.0), (height - 1.0, width - 1.0)]
    rmax = max(np.hypot(r - ci, c - cj) for r, c in corners)
    if rmax > 0.0:
        radius = radius / rmax
    out = np.stack(
        [np.broadcast_to(rows[:, None], (height, width)),
         np.broadcast_to(cols[None, :], (height, width)),
         radius]
    )[None]
    out = np.ascontiguousarray(out)
    out.setflags(write=False)
    _coord_cache[key] = out
    return out


_coord_tensor_cache = {}


def coordconv_augment(feature, principal_point=None):
    """Append the i / j / radius channels to a feature map."""
    n, _, h, w = feature.shape
    base = coord_channels(h, w, principal_point)
    key = (n, id(base))
    coords = _coord_tensor_cache.get(key)
    if coords is None:
        coords = ad.Tensor(np.ascontiguousarray(np.broadcast_to(base, (n, 3, h, w))))
        _coord_tensor_cache[key] = coords
    return ad.concat_channels([feature, coords])


# ---------------------------------------------------------------------------
# layers


class Conv:
    """A conv2d layer owning weight and bias leaves.

    Weights are uniform with bound sqrt(6/fan_in), which keeps activation
    variance roughly level through the ELU stack; biases get the usual
    1/sqrt(fan_in) bound.
    """

    def __init__(self, rng, name, in_ch, out_ch, kernel, stride=1):
        fan_in = in_ch * kernel * kernel
        bound = np.sqrt(6.0 / fan_in)
        self.name = name
        self.stride = stride
        self.weight = ad.Tensor(
            rng.uniform(-bound, bound, size=(out_ch, in_ch, kernel, kernel)), requires_grad=True
        )
        self.bias = ad.Tensor(
            rng.uniform(-1.0, 1.0, size=(1, out_ch, 1, 1)) / np.sqrt(fan_in), requires_grad=True
        )

    def __call__(self, x):
        return ad.conv2d(x, self.weight, self.bias, stride=self.stride)

    def parameters(self):
        return [(self.name + ".weight", self.weight), (self.name + ".bias", self.bias)]


def fusion_members(p, num_levels):
    """Level indices entering the fusion at level p: p-1, p, p+1 clipped to range."""
    return [i for i in (p - 1, p, p + 1) if 1 <= i <= num_levels]


def channel_budgets(width, ratio, n_neighbors):
    """Split `width` output channels between the same-level projection and
    its neighbors: same gets round(ratio*width), the rest is divided evenly.
    Rounding slack folds into the same-level share, and each neighbor is
    capped at width/(n+1) so the same-level slice is never the narrowest."""
    if n_neighbors == 0:
        return width, 0
    same = int(round(width * ratio))
    same = min(max(same, 1), width - n_neighbors)
    per = min((width - same) // n_neighbors, width // (n_neighbors + 1))
    same = width - per * n_neighbors
    return same, per


class FusionBlock:
    """Eq-style neighbourhood fusion producing the decoder feature at level p."""

    def __init__(self, rng, cfg, p, in_widths):
        # in_widths[i-1] = channel count of the (possibly augmented) level-i input
        self.level = p
        self.cfg = cfg
        name = f"fusion.{p}"
        w_p = cfg.widths[p - 1]
        k = cfg.kernel_size
        if cfg.fusion_enabled:
            self.members = fusion_members(p, cfg.num_levels)
            same, per = channel_budgets(w_p, cfg.reservation, len(self.members) - 1)
            if per < 1 and len(self.members) > 1:
                raise ConfigError(f"level {p} width {w_p} too narrow to split across {len(self.members)} members")
            self.proj_down = None
            self.proj_same = None
            self.proj_up = None
            for i in self.members:
                cin = in_widths[i - 1]
                if i == p - 1:
                    self.proj_down = Conv(rng, f"{name}.proj_down", cin, per, k, stride=2)
                elif i == p:
                    self.proj_same = Conv(rng, f"{name}.proj_same", cin, same, 1)
                else:
                    self.proj_up = Conv(rng, f"{name}.proj_up", cin, per, 1)
            self.conv = Conv(rng, f"{name}.conv", w_p, w_p, k)
        else:
            self.members = [p]
            self.proj_down = self.proj_same = self.proj_up = None
            self.conv = Conv(rng, f"{name}.conv", in_widths[p - 1], w_p, k)

    def __call__(self, inputs):
        """inputs: list of per-level tensors, index i-1 = level i."""
        p = self.level
        if not self.cfg.fusion_enabled:
            return ad.elu(self.conv(inputs[p - 1]))
        parts = []
        for i in self.members:
            feature = inputs[i - 1]
            if i == p - 1:
                parts.append(ad.elu(self.proj_down(feature)))
            elif i == p:
                parts.append(ad.elu(self.proj_same(feature)))
            else:
                parts.append(ad.elu(self.proj_up(ad.upsample_nearest(feature, 2))))
        return ad.elu(self.conv(ad.concat_channels(parts)))

    def parameters(self):
        out = []
        for layer in (self.proj_down, self.proj_same, self.proj_up):
            if layer is not None:
                out.extend(layer.parameters())
        out.extend(self.conv.parameters())
        return out


class RefineModule:
    """Residual sub-pixel refinement from scale s+1 to scale s.

    The coarse disparity is mapped back to logit space, super-resolved
    through a 4-channel conv + pixel shuffle, and corrected by (a) a
    residual tower over the coarse decoder features (32/32/16/4 channels,
    then shuffle) and (b) a post conv stack on the merged logits. One final
    sigmoid rescale restores the (0, d_max) range, so zeroed correction
    branches leave the super-resolved coarse path untouched.
    """

    LOGIT_MARGIN = 1e-12

    def __init__(self, rng, name, in_ch, kernel):
        self.name = name
        self.sr = Conv(rng, f"{name}.sr", 1, 4, kernel)
        self.res1 = Conv(rng, f"{name}.res1", in_ch, 32, kernel)
        self.res2 = Conv(rng, f"{name}.res2", 32, 32, kernel)
        self.res3 = Conv(rng, f"{name}.res3", 32, 16, kernel)
        self.res4 = Conv(rng, f"{name}.res4", 16, 4, kernel)
        self.post1 = Conv(rng, f"{name}.post1", 1, 16, kernel)
        self.post2 = Conv(rng, f"{name}.post2", 16, 1, kernel)
        # start the cascade at the identity: sr taps the center (shuffle then
        # reduces to nearest upsampling) and both correction tails emit zero
        self.sr.weight.values[:] = 0.0
        self.sr.weight.values[:, 0, kernel // 2, kernel // 2] = 1.0
        self.sr.bias.values[:] = 0.0
        for tail in (self.res4, self.post2):
            tail.weight.values[:] = 0.0
            tail.bias.values[:] = 0.0

    def _coarse_logits(self, coarse_disp, d_max):
        frac = ad.clamp(ad.scale(coarse_disp, 1.0 / d_max), self.LOGIT_MARGIN, 1.0 - self.LOGIT_MARGIN)
        return ad.sub(ad.log(frac), ad.log(ad.sub(ad.scalar(1.0), frac)))

    def super_resolve(self, coarse_disp, d_max):
        """The bare sub-pixel coarse path, no residual correction."""
        logits = ad.pixel_shuffle(self.sr(self._coarse_logits(coarse_disp, d_max)), 2)
        return ad.scale(ad.sigmoid(logits), d_max)

    def __call__(self, coarse_disp, features, d_max):
        sr_logits = ad.pixel_shuffle(self.sr(self._coarse_logits(coarse_disp, d_max)), 2)
        tower = ad.elu(self.res1(features))
        tower = ad.elu(self.res2(tower))
        tower = ad.elu(self.res3(tower))
        residual = ad.pixel_shuffle(self.res4(tower), 2)
        merged = ad.add(sr_logits, residual)
        refined = ad.add(merged, self.post2(ad.elu(self.post1(merged))))
        return ad.scale(ad.sigmoid(refined), d_max)

    def parameters(self):
        out = []
        for layer in (self.sr, self.res1, self.res2, self.res3, self.res4, self.post1, self.post2):
            out.extend(layer.parameters())
        return out


@dataclass
class DisparitySet:
    """Per-scale disparity maps; maps[s] has extents (H/2^s, W/2^s) and
    values in (0, d_max) normalized-width units."""

    maps: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.maps) != 4:
            raise ConfigError(f"DisparitySet carries exactly 4 scales, got {len(self.maps)}")
        n, c, h, w = self.maps[0].shape
        for s, m in enumerate(self.maps):
            if m.shape != (n, 1, h >> s, w >> s):
                raise ConfigError(f"scale {s} has shape {m.shape}, expected {(n, 1, h >> s, w >> s)}")


class DepthNet:
    """Full pipeline: encode, coordconv, fuse, decode, refine."""

    def __init__(self, cfg: ArchConfig, seed=0, _rng=None):
        self.cfg = cfg
        rng = np.random.default_rng(seed) if _rng is None else _rng
        L = cfg.num_levels
        k = cfg.kernel_size
        extra = 3 if cfg.coordconv_enabled else 0

        self.encoder = []
        prev = 3
        for p in range(1, L + 1):
            w = cfg.widths[p - 1]
            self.encoder.append(
                (Conv(rng, f"encoder.{p}.conv1", prev, w, k, stride=2), Conv(rng, f"encoder.{p}.conv2", w, w, k))
            )
            prev = w

        aug_widths = [w + extra for w in cfg.widths]
        self.fusion = [FusionBlock(rng, cfg, p, aug_widths) for p in range(1, L + 1)]

        # decoder stage p consumes upsampled level-(p+1) stream + augmented
        # fused skip at level p; stage 0 has no skip. With refinement on,
        # scales 2..0 come from refinement, so the decoder stops at level 1.
        self.min_level = 1 if cfg.refinement_enabled else 0
        self.decoder = {}
        for p in range(L - 1, self.min_level - 1, -1):
            if p >= 1:
                cin = cfg.widths[p] + cfg.widths[p - 1] + extra
                cout = cfg.widths[p - 1]
            else:
                cin = cfg.widths[0]
                cout = cfg.widths[0]
            self.decoder[p] = Conv(rng, f"decoder.{p}.conv", cin, cout, k)

        feat_width = lambda level: cfg.widths[max(level, 1) - 1]
        self.heads = {}
        self.refine = {}
        if cfg.refinement_enabled:
            self.heads[3] = Conv(rng, "head.3.conv", feat_width(3), 1, k)
            for s in (2, 1, 0):
                self.refine[s] = RefineModule(rng, f"refine.{s}", feat_width(s + 1), k)
        else:
            for s in (3, 2, 1, 0):
                self.heads[s] = Conv(rng, f"head.{s}.conv", feat_width(s), 1, k)

    # -- evaluation ----------------------------------------------------

    def encode(self, image):
        L = self.cfg.num_levels
        n, c, h, w = image.shape
        multiple = 1 << L
        if h % multiple or w % multiple:
            raise ConfigError(f"input extents {h}x{w} must be divisible by 2^{L} = {multiple}")
        pyramid = []
        x = image
        for conv1, conv2 in self.encoder:
            x = ad.elu(conv2(ad.elu(conv1(x))))
            pyramid.append(x)
        return pyramid

    def _center(self, feature, principal_point, level):
        if principal_point is None:
            return None
        return (principal_point[0] / (1 << level), principal_point[1] / (1 << level))

    def _augment(self, feature, principal_point, level):
        if not self.cfg.coordconv_enabled:
            return feature
        return coordconv_augment(feature, self._center(feature, principal_point, level))

    def forward(self, image, principal_point=None):
        cfg = self.cfg
        L = cfg.num_levels
        pyramid = self.encode(image)
        augmented = [self._augment(f, principal_point, p) for p, f in enumerate(pyramid, start=1)]
        fused = [block(augmented) for block in self.fusion]

        feats = {L: fused[L - 1]}
        x = feats[L]
        for p in range(L - 1, self.min_level - 1, -1):
            up = ad.upsample_nearest(x, 2)
            if p >= 1:
                skip = self._augment(fused[p - 1], principal_point, p)
                x = ad.elu(self.decoder[p](ad.concat_channels([up, skip])))
            else:
                x = ad.elu(self.decoder[p](up))
            feats[p] = x

        def head_out(s):
            return ad.scale(ad.sigmoid(self.heads[s](feats[s])), cfg.d_max)

        if cfg.refinement_enabled:
            d3 = head_out(3)
            d2 = self.refine[2](d3, feats[3], cfg.d_max)
            d1 = self.refine[1](d2, feats[2], cfg.d_max)
            d0 = self.refine[0](d1, feats[1], cfg.d_max)
            maps = [d0, d1, d2, d3]
        else:
            maps = [head_out(s) for s in (0, 1, 2, 3)]
        return DisparitySet(maps)

    # -- parameters and persistence -------------------------------------

    def parameters(self):
        out = []
        for conv1, conv2 in self.encoder:
            out.extend(conv1.parameters())
            out.extend(conv2.parameters())
        for block in self.fusion:
            out.extend(block.parameters())
        for p in sorted(self.decoder, reverse=True):
            out.extend(self.decoder[p].parameters())
        for s in sorted(self.heads, reverse=True):
            out.extend(self.heads[s].parameters())
        for s in sorted(self.refine, reverse=True):
            out.extend(self.refine[s].parameters())
        return out

    def state_dict(self):
        return {name: t.values.copy() for name, t in self.parameters()}

    def load_state_dict(self, state):
        params = self.parameters()
        names = [n for n, _ in params]
        missing = [n for n in names if n not in state]
        extra = [n for n in state if n not in names]
        if missing or extra:
            raise ConfigError(f"state mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
        for name, t in params:
            if state[name].shape != t.values.shape:
                raise ConfigError(
                    f"{name}: stored shape {state[name].shape} != model shape {t.values.shape}"
                )
            t.values[...] = state[name]


def count_parameters(net):
    return sum(t.values.size for _, t in net.parameters())


# ---------------------------------------------------------------------------
# checkpoint format: b"FDPT1", then per parameter (in construction order):
#   uint16 LE name length, utf-8 name, 4x uint64 LE extents,
#   float64 LE values in C order.

CHECKPOINT_MAGIC = b"FDPT1"


class CheckpointError(IOError):
    pass


def save_checkpoint(path, net):
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        for name, t in net.parameters():
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<4Q", *t.values.shape))
            f.write(t.values.astype("<f8", copy=False).tobytes())


def read_checkpoint(path):
    """Read a checkpoint into an ordered {name: array} dict."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:5] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:5]!r}, expected {CHECKPOINT_MAGIC!r}")
    state = {}
    off = 5
    while off < len(blob):
        if off + 2 > len(blob):
            raise CheckpointError(f"{path}: truncated record header at byte {off}")
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        if off + nlen + 32 > len(blob):
            raise CheckpointError(f"{path}: truncated record at byte {off}")
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        shape = struct.unpack_from("<4Q", blob, off)
        off += 32
        count = int(np.prod(shape))
        end = off + 8 * count
        if end > len(blob):
            raise CheckpointError(f"{path}: payload for {name} runs past end of file")
        state[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(shape).copy()
        off = end
    return state


def _arch_from_state(state):
    """Recover an ArchConfig from checkpoint record names and shapes."""
    levels = set()
    for name in state:
        if name.startswith("encoder."):
            levels.add(int(name.split(".")[1]))
    if not levels:
        raise CheckpointError("no encoder records in checkpoint")
    L = max(levels)
    if levels != set(range(1, L + 1)):
        raise CheckpointError(f"encoder levels {sorted(levels)} are not contiguous")
    widths = tuple(state[f"encoder.{p}.conv1.weight"].shape[0] for p in range(1, L + 1))
    kernel = state["encoder.1.conv1.weight"].shape[2]
    fusion_enabled = any(".proj_same." in name for name in state)
    refinement_enabled = any(name.startswith("refine.") for name in state)
    if fusion_enabled:
        probe = state["fusion.1.proj_same.weight"].shape[1]
    else:
        probe = state["fusion.1.conv.weight"].shape[1]
    coordconv_enabled = probe == widths[0] + 3
    if fusion_enabled:
        # reservation recovered from an interior level when available so the
        # integer re-split reproduces the stored budgets at every level
        p = 2 if L >= 3 else 1
        w_p = widths[p - 1]
        same = state[f"fusion.{p}.proj_same.weight"].shape[0]
        reservation = same / w_p
    else:
        reservation = 0.5
    return ArchConfig(
        num_levels=L,
        widths=widths,
        kernel_size=kernel,
        reservation=reservation,
        coordconv_enabled=coordconv_enabled,
        fusion_enabled=fusion_enabled,
        refinement_enabled=refinement_enabled,
    )


def _conform_fusion_budgets(net, state):
    """Resize fusion projection layers to the stored shapes.

    Integer channel budgets are derived from the reservation ratio, and the
    ratio recovered from a checkpoint may re-round differently at some
    levels; the stored shapes are authoritative.
    """
    for block in net.fusion:
        total = 0
        for proj in (block.proj_down, block.proj_same, block.proj_up):
            if proj is None:
                continue
            stored = state.get(proj.name + ".weight")
            if stored is None:
                raise CheckpointError(f"missing record {proj.name}.weight")
            if stored.shape != proj.weight.shape:
                proj.weight = ad.zeros(stored.shape, requires_grad=True)
                proj.bias = ad.zeros((1, stored.shape[0], 1, 1), requires_grad=True)
            total += stored.shape[0]
        if block.proj_same is not None and total != block.conv.weight.shape[1]:
            raise CheckpointError(
                f"fusion.{block.level}: projected channels {total} != conv input {block.conv.weight.shape[1]}"
            )


def load_checkpoint(path, d_max=None):
    """Rebuild a network from a checkpoint alone.

    The architecture is inferred from record names/shapes; d_max is not
    stored in the weights and defaults to the ArchConfig default.
    """
    state = read_checkpoint(path)
    cfg = _arch_from_state(state)
    if d_max is not None:
        cfg.d_max = float(d_max)
    net = DepthNet(cfg, seed=0)
    _conform_fusion_budgets(net, state)
    net.load_state_dict(state)
    return net
