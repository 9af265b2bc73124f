"""The gated multi-branch network.

A model is N stacked blocks on top of a small convolution stem. Each block
runs K_n identical bottleneck branches ("factor modules") whose outputs are
stacked and contracted against a per-image gate vector produced by a tiny
GAP-MLP-sigmoid side network (the "factor selection module"), then added to
a shortcut. Concatenating all blocks' gate vectors gives a compact signature
of which branches fired; the head fuses a projection of that signature with
a projection of the pooled final feature map and classifies identities.

Four modes share one code path:

- ``mlfn``: gates from the selection modules, signature fused into the head.
- ``nofusion``: gates active, but the classifier reads only the projected
  pooled feature; the signature is still computed and reported.
- ``resnext``: gates pinned to 1, no selection modules exist. The head still
  adds the (now constant) projected signature, which keeps this mode's
  forward bit-compatible with a fully gated-on model and only shifts the
  classifier input by a constant.
- ``resnet``: each block is a single wider holistic branch with its
  parameter count matched to the K_n branches it replaces.
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import tensor as T
from .errors import CheckpointError, ContractError, ShapeError

MODES = ("mlfn", "nofusion", "resnext", "resnet")

CKPT_MAGIC = b"MLFN"
CKPT_VERSION = 1


@dataclass(frozen=True)
class MLFNConfig:
    """Full static description of a model; hashable into a config digest."""

    n_blocks: int = 4
    factor_counts: tuple = (4, 4, 4, 4)
    channels: tuple = (8, 16, 32, 64)
    strides: tuple = (1, 2, 2, 1)
    fsm_hidden: tuple = ((16, 8),) * 4
    stem_channels: int = 8
    stem_stride: int = 1
    in_channels: int = 3
    input_hw: tuple = (32, 16)
    fusion_dim: int = 64
    n_classes: int = 32
    mode: str = "mlfn"
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        for field in ("factor_counts", "channels", "strides", "fsm_hidden",
                      "input_hw"):
            object.__setattr__(self, field, tuple(
                tuple(v) if isinstance(v, (list, tuple)) else v
                for v in getattr(self, field)))
        if self.n_blocks < 1:
            raise ContractError("need at least one block")
        for field in ("factor_counts", "channels", "strides", "fsm_hidden"):
            if len(getattr(self, field)) != self.n_blocks:
                raise ContractError(
                    f"{field} has {len(getattr(self, field))} entries for "
                    f"{self.n_blocks} blocks")
        if self.mode not in MODES:
            raise ContractError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.dtype not in ("float32", "float64"):
            raise ContractError(f"dtype must be float32 or float64, got {self.dtype}")
        flat = (self.factor_counts + self.channels + self.strides
                + tuple(w for pair in self.fsm_hidden for w in pair)
                + self.input_hw
                + (self.stem_channels, self.stem_stride, self.in_channels,
                   self.fusion_dim, self.n_classes))
        if any((not isinstance(v, int)) or v < 1 for v in flat):
            raise ContractError("all structural sizes must be positive integers")
        for pair in self.fsm_hidden:
            if len(pair) != 2:
                raise ContractError("fsm_hidden entries must be (width1, width2)")

    # -- derived quantities -------------------------------------------------

    @property
    def signature_dim(self) -> int:
        return sum(self.factor_counts)

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def block_in_channels(self, n: int) -> int:
        """Input channel count of block ``n`` (0-based here)."""
        return self.stem_channels if n == 0 else self.channels[n - 1]

    def fm_mid(self, n: int) -> int:
        """Bottleneck width of each branch in block ``n`` (0-based)."""
        return max(2, self.channels[n] // 4)

    def resnet_width(self, n: int) -> int:
        """Bottleneck width of the holistic branch that replaces the K_n
        branches of block ``n`` at (approximately) equal parameter count."""
        i, o, m = self.block_in_channels(n), self.channels[n], self.fm_mid(n)
        c = i + o + 6
        target = self.factor_counts[n] * (9 * m * m + c * m + 3 * o)
        root = (-c + math.sqrt(c * c - 36.0 * (3 * o - target))) / 18.0

        def count(width: int) -> int:
            return 9 * width * width + c * width + 3 * o

        lo, hi = max(1, math.floor(root)), max(1, math.ceil(root))
        return lo if abs(count(lo) - target) <= abs(count(hi) - target) else hi

    def replace(self, **kw) -> "MLFNConfig":
        return dataclasses.replace(self, **kw)

    def canonical_text(self) -> str:
        def render(v):
            if isinstance(v, tuple):
                return ",".join(render(e) for e in v)
            return str(v)

        lines = []
        for f in sorted(dataclasses.fields(self), key=lambda f: f.name):
            v = getattr(self, f.name)
            if f.name == "fsm_hidden":
                lines.append(f"{f.name}=" + ",".join(f"{a}:{b}" for a, b in v))
            else:
                lines.append(f"{f.name}={render(v)}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()

    # -- presets ------------------------------------------------------------

    @classmethod
    def toy(cls, **overrides) -> "MLFNConfig":
        return cls(**overrides)

    @classmethod
    def paper_reid(cls, **overrides) -> "MLFNConfig":
        """Full-scale person matching layout: 16 blocks of 32 branches."""
        base = dict(
            n_blocks=16,
            factor_counts=(32,) * 16,
            channels=(256,) * 3 + (512,) * 4 + (1024,) * 6 + (2048,) * 3,
            strides=(1, 1, 1) + (2, 1, 1, 1) + (2, 1, 1, 1, 1, 1) + (2, 1, 1),
            fsm_hidden=((128, 64),) * 3 + ((256, 128),) * 4
                       + ((512, 128),) * 6 + ((512, 128),) * 3,
            stem_channels=64,
            stem_stride=2,
            input_hw=(256, 128),
            fusion_dim=1024,
            n_classes=751,
        )
        base.update(overrides)
        return cls(**base)

    @classmethod
    def paper_cifar(cls, **overrides) -> "MLFNConfig":
        """Small-image classification layout: 9 blocks of 32 branches."""
        base = dict(
            n_blocks=9,
            factor_counts=(32,) * 9,
            channels=(64,) * 3 + (128,) * 3 + (256,) * 3,
            strides=(1, 1, 1, 2, 1, 1, 2, 1, 1),
            fsm_hidden=((128, 64),) * 9,
            stem_channels=16,
            stem_stride=1,
            input_hw=(32, 32),
            fusion_dim=1024,
            n_classes=100,
        )
        base.update(overrides)
        return cls(**base)


@dataclass
class ForwardResult:
    logits: ad.Variable
    fused: ad.Variable
    signature: ad.Variable
    final_map: ad.Variable
    pooled: ad.Variable
    block_outputs: list
    selections: list


def _rng_for(seed: int, name: str) -> np.random.Generator:
    tag = int.from_bytes(hashlib.blake2b(name.encode(), digest_size=8).digest(),
                         "little")
    return np.random.default_rng(np.random.SeedSequence([seed, tag]))


class MLFNModel:
    """Parameters plus forward logic for one configuration.

    Parameters live in ``params`` (name -> Variable, insertion-ordered) and
    batch-norm running statistics in ``states`` (name -> RunningStats). Names
    are stable across modes, and each parameter is initialized from an RNG
    stream derived from (seed, name), so two modes built from the same seed
    share values for every name they have in common.
    """

    def __init__(self, config: MLFNConfig, seed: int):
        self.config = config
        self.seed = seed
        self.params: dict[str, ad.Variable] = {}
        self.states: dict[str, T.RunningStats] = {}
        self._specs: dict[str, T.ConvSpec] = {}
        self._build()

    # -- construction ---------------------------------------------------

    def _add_conv(self, name: str, spec: T.ConvSpec) -> None:
        dt = self.config.np_dtype
        fan_in = spec.in_channels * spec.kernel[0] * spec.kernel[1]
        w = _rng_for(self.seed, name + ".w").normal(
            0.0, math.sqrt(2.0 / fan_in), size=spec.weight_shape()).astype(dt)
        self.params[name + ".w"] = ad.Variable(w, requires_grad=True,
                                               name=name + ".w")
        self.params[name + ".b"] = ad.Variable(
            np.zeros(spec.out_channels, dt), requires_grad=True, name=name + ".b")
        self._specs[name] = spec

    def _add_bn(self, name: str, channels: int) -> None:
        dt = self.config.np_dtype
        self.params[name + ".gamma"] = ad.Variable(
            np.ones(channels, dt), requires_grad=True, name=name + ".gamma")
        self.params[name + ".beta"] = ad.Variable(
            np.zeros(channels, dt), requires_grad=True, name=name + ".beta")
        self.states[name] = T.RunningStats.fresh(channels, dt)

    def _add_linear(self, name: str, d_in: int, d_out: int) -> None:
        dt = self.config.np_dtype
        w = _rng_for(self.seed, name + ".w").normal(
            0.0, math.sqrt(2.0 / d_in), size=(d_in, d_out)).astype(dt)
        self.params[name + ".w"] = ad.Variable(w, requires_grad=True,
                                               name=name + ".w")
        self.params[name + ".b"] = ad.Variable(
            np.zeros(d_out, dt), requires_grad=True, name=name + ".b")

    def _build(self) -> None:
        cfg = self.config
        self._add_conv("stem.conv", T.ConvSpec(
            cfg.in_channels, cfg.stem_channels, (3, 3),
            (cfg.stem_stride, cfg.stem_stride), (1, 1)))
        self._add_bn("stem.bn", cfg.stem_channels)

        for n in range(cfg.n_blocks):
            tag = f"block{n + 1}"
            in_c, out_c = cfg.block_in_channels(n), cfg.channels[n]
            stride = cfg.strides[n]

            if cfg.mode == "resnet":
                mid = cfg.resnet_width(n)
                self._add_branch(f"{tag}.res", in_c, out_c, mid, stride)
            else:
                mid = cfg.fm_mid(n)
                for i in range(cfg.factor_counts[n]):
                    self._add_branch(f"{tag}.fm{i + 1}", in_c, out_c, mid, stride)
                if cfg.mode in ("mlfn", "nofusion"):
                    h1, h2 = cfg.fsm_hidden[n]
                    self._add_linear(f"{tag}.fsm.fc1", in_c, h1)
                    self._add_bn(f"{tag}.fsm.bn1", h1)
                    self._add_linear(f"{tag}.fsm.fc2", h1, h2)
                    self._add_bn(f"{tag}.fsm.bn2", h2)
                    self._add_linear(f"{tag}.fsm.fc3", h2, cfg.factor_counts[n])

            if in_c != out_c or stride != 1:
                self._add_conv(f"{tag}.shortcut.conv", T.ConvSpec(
                    in_c, out_c, (1, 1), (stride, stride), (0, 0)))
                self._add_bn(f"{tag}.shortcut.bn", out_c)

        d = cfg.fusion_dim
        self._add_linear("head.t_y", cfg.channels[-1], d)
        if cfg.mode != "nofusion":
            self._add_linear("head.t_s", cfg.signature_dim, d)
        self._add_linear("head.cls", d, cfg.n_classes)

    def _add_branch(self, tag: str, in_c: int, out_c: int, mid: int,
                    stride: int) -> None:
        self._add_conv(f"{tag}.conv1", T.ConvSpec(in_c, mid, (1, 1)))
        self._add_bn(f"{tag}.bn1", mid)
        self._add_conv(f"{tag}.conv2", T.ConvSpec(
            mid, mid, (3, 3), (stride, stride), (1, 1)))
        self._add_bn(f"{tag}.bn2", mid)
        self._add_conv(f"{tag}.conv3", T.ConvSpec(mid, out_c, (1, 1)))
        self._add_bn(f"{tag}.bn3", out_c)

    # -- layer helpers ----------------------------------------------------

    def _conv(self, tape, x, name):
        return ad.conv2d(tape, x, self.params[name + ".w"],
                         self.params[name + ".b"], self._specs[name])

    def _bn(self, tape, x, name, training):
        return ad.batch_norm(tape, x, self.params[name + ".gamma"],
                             self.params[name + ".beta"], self.states[name],
                             training=training)

    def _linear(self, tape, x, name):
        return ad.linear(tape, x, self.params[name + ".w"],
                         self.params[name + ".b"])

    def _branch(self, tape, tag, x, training):
        h = ad.activation(tape, self._bn(
            tape, self._conv(tape, x, f"{tag}.conv1"), f"{tag}.bn1", training),
            "relu")
        h = ad.activation(tape, self._bn(
            tape, self._conv(tape, h, f"{tag}.conv2"), f"{tag}.bn2", training),
            "relu")
        return self._bn(tape, self._conv(tape, h, f"{tag}.conv3"),
                        f"{tag}.bn3", training)

    def _shortcut(self, tape, n, x, training):
        tag = f"block{n}.shortcut"
        if tag + ".conv.w" not in self.params:
            return x
        return self._bn(tape, self._conv(tape, x, tag + ".conv"),
                        tag + ".bn", training)

    def _const_gates(self, batch: int, k: int, value=None) -> ad.Variable:
        dt = self.config.np_dtype
        if value is None:
            arr = np.ones((batch, k), dt)
        else:
            arr = np.asarray(value, dt)
            if arr.ndim == 1:
                arr = np.broadcast_to(arr, (batch, k)).copy()
            if arr.shape != (batch, k):
                raise ShapeError(
                    f"gate override shape {arr.shape} does not broadcast to "
                    f"({batch}, {k})")
        return ad.Variable(arr)

    # -- forward ----------------------------------------------------------

    def fsm_forward(self, tape: ad.Tape, n: int, x: ad.Variable,
                    *, training: bool) -> ad.Variable:
        """Gate vector of block ``n`` (1-based) for block input ``x``."""
        tag = f"block{n}.fsm"
        if tag + ".fc1.w" not in self.params:
            raise ContractError(f"mode {self.config.mode} has no selection modules")
        h = ad.global_avg_pool(tape, x)
        h = self._linear(tape, h, tag + ".fc1")
        h = ad.activation(tape, self._bn(tape, h, tag + ".bn1", training), "relu")
        h = self._linear(tape, h, tag + ".fc2")
        h = ad.activation(tape, self._bn(tape, h, tag + ".bn2", training), "relu")
        h = self._linear(tape, h, tag + ".fc3")
        return ad.activation(tape, h, "sigmoid")

    def block_forward(self, tape: ad.Tape, n: int, x: ad.Variable,
                      *, training: bool, gate_override=None):
        """Run block ``n`` (1-based); returns (output map, gate vector)."""
        cfg = self.config
        batch = x.value.shape[0]
        k = cfg.factor_counts[n - 1]

        if cfg.mode == "resnet":
            f = self._branch(tape, f"block{n}.res", x, training)
            y = ad.add(tape, f, self._shortcut(tape, n, x, training))
            return y, self._const_gates(batch, k)

        if gate_override is not None:
            s = self._const_gates(batch, k, gate_override)
        elif cfg.mode == "resnext":
            s = self._const_gates(batch, k)
        else:
            s = self.fsm_forward(tape, n, x, training=training)

        outs = [self._branch(tape, f"block{n}.fm{i + 1}", x, training)
                for i in range(k)]
        stacked = ad.stack_last(tape, outs)
        gated = ad.mode4(tape, stacked, s)
        y = ad.add(tape, gated, self._shortcut(tape, n, x, training))
        return y, s

    def forward(self, tape: ad.Tape, x, *, training: bool,
                gate_override: dict | None = None) -> ForwardResult:
        cfg = self.config
        xv = np.ascontiguousarray(x, dtype=cfg.np_dtype)
        expect = (cfg.in_channels, *cfg.input_hw)
        if xv.ndim != 4 or xv.shape[1:] != expect:
            raise ShapeError(f"batch shape {xv.shape} does not match "
                             f"(B, {expect[0]}, {expect[1]}, {expect[2]})")
        overrides = gate_override or {}

        h = ad.activation(tape, self._bn(
            tape, self._conv(tape, ad.Variable(xv), "stem.conv"),
            "stem.bn", training), "relu")

        selections, blocks = [], []
        for n in range(1, cfg.n_blocks + 1):
            h, s = self.block_forward(tape, n, h, training=training,
                                      gate_override=overrides.get(n))
            blocks.append(h)
            selections.append(s)

        sig = factor_signature(tape, selections, expected=cfg.n_blocks)
        pooled = ad.global_avg_pool(tape, h)
        phi_y = self._linear(tape, pooled, "head.t_y")
        if cfg.mode == "nofusion":
            fused = phi_y
        else:
            phi_s = self._linear(tape, sig, "head.t_s")
            fused = ad.scale(tape, ad.add(tape, phi_y, phi_s), 0.5)
        logits = self._linear(tape, fused, "head.cls")
        return ForwardResult(logits=logits, fused=fused, signature=sig,
                             final_map=h, pooled=pooled,
                             block_outputs=blocks, selections=selections)

    # -- bookkeeping --------------------------------------------------------

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def param_count(self) -> int:
        return sum(p.value.size for p in self.params.values())


def factor_signature(tape: ad.Tape, selections: list, *,
                     expected: int | None = None) -> ad.Variable:
    """Concatenate per-block gate vectors, bottom block first."""
    if not selections:
        raise ContractError("no block selections to concatenate")
    if expected is not None and len(selections) != expected:
        raise ContractError(
            f"got {len(selections)} block selections, expected {expected}")
    return ad.concat(tape, list(selections))


def init_params(config: MLFNConfig, seed: int | None = None) -> MLFNModel:
    """Deterministically initialized model; same seed, same bits."""
    return MLFNModel(config, config.seed if seed is None else seed)


def model_forward(model: MLFNModel, batch):
    """Eval-mode forward; returns (logits, fused, signature, final map)."""
    res = model.forward(ad.Tape(), batch, training=False)
    return res.logits, res.fused, res.signature, res.final_map


# ---------------------------------------------------------------------------
# checkpoints


def _all_tensors(model: MLFNModel, extra: dict | None) -> dict[str, np.ndarray]:
    out = {name: p.value for name, p in model.params.items()}
    for name, st in model.states.items():
        out[f"state:{name}.mean"] = st.mean
        out[f"state:{name}.var"] = st.var
    for k, v in (extra or {}).items():
        out[f"extra:{k}"] = np.asarray(v)
    return out


def save_checkpoint(path, model: MLFNModel, extra: dict | None = None) -> None:
    """Write a versioned container of named float32 tensors.

    Layout: magic ``MLFN``, u32 version, u32 digest length + config digest
    (ASCII), then one record per tensor until EOF: u32 name length, UTF-8
    name, u64 rank, u64 extents, float32 little-endian data, row-major.
    """
    tensors = _all_tensors(model, extra)
    buf = bytearray()
    buf += CKPT_MAGIC
    buf += struct.pack("<I", CKPT_VERSION)
    digest = model.config.digest().encode("ascii")
    buf += struct.pack("<I", len(digest)) + digest
    for name in sorted(tensors):
        # (ascontiguousarray would silently promote rank-0 tensors to rank 1)
        data = np.asarray(tensors[name], dtype="<f4")
        if not data.flags.c_contiguous:
            data = np.ascontiguousarray(data)
        nb = name.encode("utf-8")
        buf += struct.pack("<I", len(nb)) + nb
        buf += struct.pack("<Q", data.ndim)
        buf += struct.pack(f"<{data.ndim}Q", *data.shape) if data.ndim else b""
        buf += data.tobytes()
    Path(path).write_bytes(bytes(buf))


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError("checkpoint truncated")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    @property
    def done(self) -> bool:
        return self.pos >= len(self.raw)


def load_checkpoint(path, model: MLFNModel) -> dict[str, np.ndarray]:
    """Restore parameters and running stats into ``model``; returns any
    ``extra:`` tensors (e.g. optimizer state) keyed without the prefix.

    The stored config digest must match the model's; any structural
    disagreement raises :class:`CheckpointError`.
    """
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    version = r.u32()
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    digest = r.take(r.u32()).decode("ascii")
    if digest != model.config.digest():
        raise CheckpointError(
            f"{path}: config digest mismatch (stored {digest[:12]}…, "
            f"model {model.config.digest()[:12]}…)")

    tensors: dict[str, np.ndarray] = {}
    while not r.done:
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u64()
        shape = tuple(r.u64() for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape)
        tensors[name] = data

    extra: dict[str, np.ndarray] = {}
    dt = model.config.np_dtype
    for name, data in tensors.items():
        if name.startswith("extra:"):
            extra[name[len("extra:"):]] = data.copy()
        elif name.startswith("state:"):
            base, field = name[len("state:"):].rsplit(".", 1)
            if base not in model.states or field not in ("mean", "var"):
                raise CheckpointError(f"unknown running-stat tensor {name!r}")
            target = getattr(model.states[base], field)
            if target.shape != data.shape:
                raise CheckpointError(f"shape mismatch for {name!r}")
            target[...] = data.astype(dt)
        else:
            if name not in model.params:
                raise CheckpointError(f"unknown parameter {name!r}")
            p = model.params[name]
            if p.value.shape != data.shape:
                raise CheckpointError(
                    f"shape mismatch for {name!r}: checkpoint {data.shape}, "
                    f"model {p.value.shape}")
            p.value[...] = data.astype(dt)

    missing = set(model.params) - set(tensors)
    if missing:
        raise CheckpointError(f"checkpoint is missing {sorted(missing)[:3]}…")
    return extra
