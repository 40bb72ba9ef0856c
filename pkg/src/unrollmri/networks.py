"""Trainable regularizer networks and the unrolled reconstruction assembly.

The main regularizer is a down-up network: the (whitened, split-complex)
input is taken to half resolution, runs through a chain of down-up blocks
whose outputs are concatenated, and is brought back to full resolution with a
feature-doubling convolution and sub-pixel shuffling. The block delta is
subtracted from the whitened input, so a zero-initialized network is exactly
the identity. A small encoder-decoder with skip connections (same residual
contract) and a stride-2 conv discriminator with a global-average-pool head
complete the zoo.

A reconstruction model alternates regularizer and data-consistency layer for
a fixed number of cascades, starting from the zero-filled image; whitening
moments are estimated once from that starting image and reused everywhere.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt_io
from .ctensor import WhitenStats, whiten_coeffs, whiten_stats
from .dc import DcConfig, graph_apply_dc
from .operators import CoilwiseOp, SamplingMask, SenseOp, SensitivityMaps

ACTIVATIONS = ("relu", "prelu")


def inv_softplus(v: float) -> float:
    """Raw value whose softplus is v (v > 0)."""
    if v <= 0:
        raise ValueError(f"softplus output must be positive, got {v}")
    return float(np.log(np.expm1(v)))


@dataclass(frozen=True)
class DunConfig:
    """Down-up regularizer shape: base feature count, number of down-up
    blocks, convolutions per scale inside a block, activation kind."""

    n_f: int = 8
    num_dub: int = 2
    depth: int = 2
    activation: str = "relu"

    def __post_init__(self):
        if self.n_f < 2 or self.n_f % 2 != 0:
            raise ValueError(f"n_f must be even and >= 2, got {self.n_f}")
        if self.num_dub < 1:
            raise ValueError("need at least one down-up block")
        if self.depth < 1:
            raise ValueError("need at least one convolution per scale")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass(frozen=True)
class UnrolledConfig:
    """Assembly of the unrolled reconstruction network."""

    kind: str = "sn"  # sn | pcn
    dc: DcConfig = DcConfig(kind="gd", lam=0.1)
    cascades: int = 4
    shared: bool = True
    regularizer: str = "dun"  # dun | unet
    dun: DunConfig = DunConfig()
    train_dc_weights: bool = True
    per_cascade_dc: bool | None = None  # defaults to "not shared"

    def __post_init__(self):
        if self.kind not in ("sn", "pcn"):
            raise ValueError(f"unknown operator kind {self.kind!r}")
        if self.cascades < 1:
            raise ValueError("need at least one cascade")
        if self.regularizer not in ("dun", "unet"):
            raise ValueError(f"unknown regularizer {self.regularizer!r}")
        if self.kind == "pcn" and self.dc.kind not in ("pg", "id"):
            raise ValueError("coilwise models support only proximal or identity "
                             "data consistency")

    @property
    def dc_per_cascade(self) -> bool:
        return (not self.shared) if self.per_cascade_dc is None else self.per_cascade_dc

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @staticmethod
    def from_json(doc: str) -> "UnrolledConfig":
        d = json.loads(doc)
        d["dc"] = DcConfig(**d["dc"])
        d["dun"] = DunConfig(**d["dun"])
        return UnrolledConfig(**d)


# ---------------------------------------------------------------------------
# parameter construction


def _he_kernel(rng, cout, cin, k):
    fan_in = cin * k * k
    return rng.standard_normal((cout, cin, k, k)) * np.sqrt(2.0 / fan_in)


class ParamBank:
    """Ordered name -> Parameter map with helpers for conv blocks."""

    def __init__(self, rng: np.random.Generator, activation: str):
        self.rng = rng
        self.activation = activation
        self.params: dict[str, ad.Parameter] = {}

    def add(self, name: str, value) -> ad.Parameter:
        if name in self.params:
            raise ValueError(f"duplicate parameter {name!r}")
        p = ad.Parameter(value, name=name)
        self.params[name] = p
        return p

    def conv(self, name: str, cout: int, cin: int, k: int = 3, act: bool = False,
             scale: float = 1.0):
        self.add(f"{name}.k", scale * _he_kernel(self.rng, cout, cin, k))
        self.add(f"{name}.b", np.zeros(cout))
        if act and self.activation == "prelu":
            self.add(f"{name}.s", 0.25)


def _dun_layer_plan(cfg: DunConfig, in_chans: int):
    """(name, cout, cin, has_act) for every convolution of the regularizer;
    in_chans counts complex channels."""
    c2 = 2 * in_chans
    nf = cfg.n_f
    catw = cfg.num_dub * nf
    plan = [("head", nf, c2, True)]
    for i in range(cfg.num_dub):
        for j in range(cfg.depth):
            plan.append((f"dub{i}.pre{j}", nf, nf, True))
        plan.append((f"dub{i}.down", 2 * nf, nf, True))
        for j in range(cfg.depth):
            plan.append((f"dub{i}.low{j}", 2 * nf, 2 * nf, True))
        plan.append((f"dub{i}.up", 4 * nf, 2 * nf, False))
    plan.append(("fuse", catw, catw, True))
    plan.append(("expand", 2 * catw, catw, False))
    plan.append(("proj", c2, catw // 2, False))
    return plan


def _unet_layer_plan(cfg: DunConfig, in_chans: int):
    c2 = 2 * in_chans
    nf = cfg.n_f
    return [
        ("enc0", nf, c2, True),
        ("down1", 2 * nf, nf, True),
        ("enc1", 2 * nf, 2 * nf, True),
        ("down2", 4 * nf, 2 * nf, True),
        ("enc2", 4 * nf, 4 * nf, True),
        ("bottleneck", 4 * nf, 4 * nf, True),
        ("up2", 8 * nf, 4 * nf, False),
        ("dec1", 2 * nf, 4 * nf, True),
        ("up1", 4 * nf, 2 * nf, False),
        ("dec0", nf, 2 * nf, True),
        ("proj", c2, nf, False),
    ]


# The regularizers are residual; their final projection starts small so that
# each cascade is near-identity at init and repeated (shared) application
# cannot amplify the iterate exponentially before training has moved.
PROJ_INIT_SCALE = 0.01


def build_regularizer_params(bank: ParamBank, cfg: DunConfig, in_chans: int,
                             kind: str, prefix: str) -> None:
    plan = _dun_layer_plan(cfg, in_chans) if kind == "dun" else _unet_layer_plan(cfg, in_chans)
    for name, cout, cin, act in plan:
        scale = PROJ_INIT_SCALE if name == "proj" else 1.0
        bank.conv(f"{prefix}{name}", cout, cin, act=act, scale=scale)


def build_model_params(cfg: UnrolledConfig, in_chans: int,
                       seed: int = 0) -> dict[str, ad.Parameter]:
    """All trainable parameters of an unrolled model, deterministically
    initialized (He kernels, zero biases)."""
    bank = ParamBank(np.random.default_rng(seed), cfg.dun.activation)
    reg_prefixes = ["reg."] if cfg.shared else [f"casc{t}.reg." for t in range(cfg.cascades)]
    for prefix in reg_prefixes:
        build_regularizer_params(bank, cfg.dun, in_chans, cfg.regularizer, prefix)
    if cfg.train_dc_weights and cfg.dc.kind != "id":
        dc_prefixes = ([f"dc{t}." for t in range(cfg.cascades)]
                       if cfg.dc_per_cascade else ["dc."])
        for prefix in dc_prefixes:
            bank.add(f"{prefix}lam_raw", inv_softplus(cfg.dc.lam if cfg.dc.lam > 0 else 0.05))
            if cfg.dc.kind == "vs":
                bank.add(f"{prefix}alpha_raw", inv_softplus(cfg.dc.alpha))
                bank.add(f"{prefix}beta_raw", inv_softplus(cfg.dc.beta))
    return bank.params


def zero_regularizer(params: dict[str, ad.Parameter]) -> None:
    """Zero every regularizer weight in place; the residual paths then make
    each regularizer an exact identity."""
    for name, p in params.items():
        if ".lam_raw" not in name and ".alpha_raw" not in name and ".beta_raw" not in name:
            p.value[...] = 0.0


def count_params(params: dict[str, ad.Parameter]) -> dict[str, int]:
    reg = sum(p.value.size for n, p in params.items() if "reg." in n)
    dc = sum(p.value.size for n, p in params.items() if n.startswith("dc"))
    return {"regularizer": int(reg), "dc_scalars": int(dc),
            "total": int(reg + dc)}


# ---------------------------------------------------------------------------
# forward passes


def _act(t: ad.Tensor, params, name: str, activation: str) -> ad.Tensor:
    if activation == "prelu":
        return ad.prelu(t, params[f"{name}.s"])
    return ad.relu(t)


def _conv(t: ad.Tensor, params, name: str, stride: int = 1,
          act: str | None = None) -> ad.Tensor:
    out = ad.add_bias(ad.conv2d(t, params[f"{name}.k"], stride=stride), params[f"{name}.b"])
    if act is not None:
        out = _act(out, params, name, act)
    return out


def graph_whiten(t: ad.Tensor, stats: WhitenStats, direction: str) -> ad.Tensor:
    a, b, shift = whiten_coeffs(stats, direction)
    a_c = ad.constant(np.complex128(a))
    b_c = ad.constant(np.complex128(b))
    shift_c = ad.constant(np.complex128(shift))
    if direction == "normalize":
        z = ad.sub(t, shift_c)
        return ad.add(ad.mul(z, a_c), ad.mul(ad.conj(z), b_c))
    return ad.add(ad.add(ad.mul(t, a_c), ad.mul(ad.conj(t), b_c)), shift_c)


def _check_divisible(shape, by: int) -> None:
    h, w = shape[-2], shape[-1]
    if h % by or w % by:
        need_h = (by - h % by) % by
        need_w = (by - w % by) % by
        raise ValueError(
            f"spatial size {h}x{w} must be divisible by {by}; "
            f"pad by ({need_h}, {need_w}) (reflect padding) first")


def dun_forward(x: ad.Tensor, params, cfg: DunConfig, stats: WhitenStats,
                prefix: str = "") -> ad.Tensor:
    """Down-up regularizer. Input and output are complex [C, H, W]; the
    network's delta is subtracted from the whitened input, so zeroed
    parameters give back the input exactly."""
    _check_divisible(x.shape, 4)
    act = cfg.activation
    wx = graph_whiten(x, stats, "normalize")
    t = ad.complex_to_channels(wx)
    t = _conv(t, params, f"{prefix}head", stride=2, act=act)

    outs = []
    u = t
    for i in range(cfg.num_dub):
        block_in = u
        for j in range(cfg.depth):
            u = _conv(u, params, f"{prefix}dub{i}.pre{j}", act=act)
        u = _conv(u, params, f"{prefix}dub{i}.down", stride=2, act=act)
        for j in range(cfg.depth):
            u = _conv(u, params, f"{prefix}dub{i}.low{j}", act=act)
        u = ad.pixel_shuffle(_conv(u, params, f"{prefix}dub{i}.up"), 2)
        u = ad.add(u, block_in)
        outs.append(u)

    cat = outs[0] if len(outs) == 1 else ad.concat(outs, axis=0)
    fused = ad.add(cat, _conv(cat, params, f"{prefix}fuse", act=act))
    up = ad.pixel_shuffle(_conv(fused, params, f"{prefix}expand"), 2)
    delta = ad.channels_to_complex(_conv(up, params, f"{prefix}proj"))
    return graph_whiten(ad.sub(wx, delta), stats, "denormalize")


def unet_forward(x: ad.Tensor, params, cfg: DunConfig, stats: WhitenStats,
                 prefix: str = "") -> ad.Tensor:
    """Encoder-decoder regularizer with skip concatenations; same residual
    and shape contract as :func:`dun_forward`."""
    _check_divisible(x.shape, 4)
    act = cfg.activation
    wx = graph_whiten(x, stats, "normalize")
    t = ad.complex_to_channels(wx)
    enc0 = _conv(t, params, f"{prefix}enc0", act=act)
    enc1 = _conv(_conv(enc0, params, f"{prefix}down1", stride=2, act=act),
                 params, f"{prefix}enc1", act=act)
    enc2 = _conv(_conv(enc1, params, f"{prefix}down2", stride=2, act=act),
                 params, f"{prefix}enc2", act=act)
    bott = _conv(enc2, params, f"{prefix}bottleneck", act=act)
    u2 = ad.pixel_shuffle(_conv(bott, params, f"{prefix}up2"), 2)
    dec1 = _conv(ad.concat([u2, enc1], axis=0), params, f"{prefix}dec1", act=act)
    u1 = ad.pixel_shuffle(_conv(dec1, params, f"{prefix}up1"), 2)
    dec0 = _conv(ad.concat([u1, enc0], axis=0), params, f"{prefix}dec0", act=act)
    delta = ad.channels_to_complex(_conv(dec0, params, f"{prefix}proj"))
    return graph_whiten(ad.sub(wx, delta), stats, "denormalize")


def discriminator_params(n_f: int = 8, in_chans: int = 1,
                         seed: int = 0) -> dict[str, ad.Parameter]:
    bank = ParamBank(np.random.default_rng(seed), "relu")
    chans = [in_chans, n_f, 2 * n_f, 4 * n_f, 8 * n_f]
    for i in range(4):
        bank.conv(f"disc{i}", chans[i + 1], chans[i])
    bank.add("head.w", np.zeros(8 * n_f))
    bank.add("head.b", np.array(0.0))
    return bank.params


def discriminator_forward(img: ad.Tensor, params) -> ad.Tensor:
    """Stride-2 conv stack, global average pooling, linear head; accepts any
    spatial size and returns an unbounded real score."""
    t = img if len(img.shape) == 3 else ad.reshape(img, (1, *img.shape))
    for i in range(4):
        t = ad.relu(_conv(t, params, f"disc{i}", stride=2))
    pooled = ad.mean(t, axis=(1, 2))
    return ad.add(ad.summ(ad.mul(pooled, params["head.w"])), params["head.b"])


# ---------------------------------------------------------------------------
# unrolled assembly


REGULARIZERS = {"dun": dun_forward, "unet": unet_forward}


def _pad_to_multiple(t: ad.Tensor, by: int) -> tuple[ad.Tensor, tuple]:
    h, w = t.shape[-2], t.shape[-1]
    ph = (by - h % by) % by
    pw = (by - w % by) % by
    if ph == 0 and pw == 0:
        return t, None
    padded = ad.pad_reflect(t, ((0, 0), (0, ph), (0, pw)))
    return padded, (slice(None), slice(0, h), slice(0, w))


def apply_regularizer(x: ad.Tensor, params, cfg: UnrolledConfig,
                      stats: WhitenStats, cascade: int) -> ad.Tensor:
    prefix = "reg." if cfg.shared else f"casc{cascade}.reg."
    fwd = REGULARIZERS[cfg.regularizer]
    padded, crop_slices = _pad_to_multiple(x, 4)
    out = fwd(padded, params, cfg.dun, stats, prefix)
    if crop_slices is not None:
        out = ad.crop(out, crop_slices)
    return out


def _dc_weights(params, cfg: UnrolledConfig, cascade: int,
                lam_override: float | None):
    """(lam, alpha, beta) for one cascade: trainable softplus Tensors, fixed
    config floats, or an explicit override."""
    if lam_override is not None:
        return float(lam_override), cfg.dc.alpha, cfg.dc.beta
    if not cfg.train_dc_weights or cfg.dc.kind == "id":
        return cfg.dc.lam, cfg.dc.alpha, cfg.dc.beta
    prefix = f"dc{cascade}." if cfg.dc_per_cascade else "dc."
    lam = ad.softplus(params[f"{prefix}lam_raw"])
    if cfg.dc.kind == "vs":
        return (lam, ad.softplus(params[f"{prefix}alpha_raw"]),
                ad.softplus(params[f"{prefix}beta_raw"]))
    return lam, cfg.dc.alpha, cfg.dc.beta


def make_operator(cfg: UnrolledConfig, mask: SamplingMask,
                  smaps: SensitivityMaps | None, coils: int | None = None):
    if cfg.kind == "sn":
        if smaps is None:
            raise ValueError("sensitivity model needs coil maps")
        return SenseOp(smaps, mask)
    if coils is None:
        raise ValueError("coilwise model needs the coil count")
    return CoilwiseOp(coils, mask)


def unrolled_graph(y: np.ndarray, op, params, cfg: UnrolledConfig,
                   stats: WhitenStats | None = None,
                   lam_override: float | None = None,
                   dc_override: DcConfig | None = None,
                   x0: np.ndarray | None = None):
    """Build the full reconstruction graph.

    Returns (magnitude Tensor [H, W], final complex Tensor [C, H, W],
    per-cascade data-term trace ||A x^t - y||).
    """
    dc_cfg = cfg.dc if dc_override is None else dc_override
    if x0 is None:
        x0 = op.adjoint(y)
    if stats is None:
        stats = whiten_stats(x0)
    x = ad.constant(x0, name="x0")
    trace = []
    for t in range(cfg.cascades):
        x = apply_regularizer(x, params, cfg, stats, t)
        lam, alpha, beta = _dc_weights(params, cfg, t, lam_override)
        x = graph_apply_dc(x, y, op, dc_cfg, lam=lam, alpha=alpha, beta=beta)
        trace.append(float(np.linalg.norm(op.forward(x.value) - y)))
    return ad.rss(x), x, trace


def unrolled_recon(y: np.ndarray, mask: SamplingMask, params, cfg: UnrolledConfig,
                   smaps: SensitivityMaps | None = None,
                   stats: WhitenStats | None = None,
                   lam_override: float | None = None,
                   dc_override: DcConfig | None = None):
    """ndarray front end: (magnitude image, final complex channels, trace)."""
    op = make_operator(cfg, mask, smaps, coils=y.shape[0])
    mag_t, x_t, trace = unrolled_graph(y, op, params, cfg, stats=stats,
                                       lam_override=lam_override,
                                       dc_override=dc_override)
    return mag_t.value, x_t.value, trace


# ---------------------------------------------------------------------------
# checkpoint bundle


@dataclass
class ModelCheckpoint:
    """Named parameters + model configuration + training metadata."""

    cfg: UnrolledConfig
    params: dict[str, ad.Parameter]
    meta: dict = field(default_factory=dict)

    def save(self, path) -> None:
        arrays = {name: p.value for name, p in self.params.items()}
        meta = dict(self.meta)
        meta["config"] = json.loads(self.cfg.to_json())
        ckpt_io.save_arrays(path, arrays, meta)

    @staticmethod
    def load(path) -> "ModelCheckpoint":
        arrays, meta = ckpt_io.load_arrays(path)
        cfg = UnrolledConfig.from_json(json.dumps(meta.pop("config")))
        params = {name: ad.Parameter(value, name=name)
                  for name, value in arrays.items()}
        return ModelCheckpoint(cfg=cfg, params=params, meta=meta)
