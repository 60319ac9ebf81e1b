"""The growable radiance field.

Block 1 (the base block) is a plain ReLU MLP on the position encoding.
Every later block ``l`` maps ``[z_{l-1}, gamma(x)]`` through ``D_res`` ReLU
layers to a new feature ``z_l``. Each block owns a head: a density affine
on ``z_l`` and a colour branch ``[z_l, gamma(d)] -> W/2 -> 3``. Head ``L``
sums the raw outputs of heads 1..L and only then applies ReLU (density)
and sigmoid (colour).
"""

from __future__ import annotations

import dataclasses
import io
import json
import struct
from pathlib import Path

import numpy as np

from .autodiff import Node, ParamVector, Tape
from .encoding import EncodingConfig

MAGIC = b"PNRF"
FORMAT_VERSION = 1


class FieldLoadError(ValueError):
    """Raised for unreadable or inconsistent parameter files."""


@dataclasses.dataclass(frozen=True)
class FieldConfig:
    width: int = 256
    D_base: int = 4
    D_res: int = 2
    L_max: int = 1
    encoding: EncodingConfig = dataclasses.field(default_factory=EncodingConfig)
    skip: bool = True
    residual: bool = True

    def __post_init__(self):
        for name in ("width", "D_base", "D_res", "L_max"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")

    @property
    def color_hidden(self) -> int:
        return max(self.width // 2, 1)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["encoding"]["scene_center"] = list(d["encoding"]["scene_center"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> FieldConfig:
        d = dict(d)
        enc = dict(d.pop("encoding"))
        enc["scene_center"] = tuple(enc["scene_center"])
        return cls(encoding=EncodingConfig(**enc), **d)

    def block_input_width(self, block: int) -> int:
        if block == 1:
            return self.encoding.pos_width
        return self.width + (self.encoding.pos_width if self.skip else 0)

    def block_shapes(self, block: int) -> list[tuple[str, tuple[int, ...]]]:
        """(name, shape) of every segment owned by ``block``, in layout order."""
        W, P = self.width, f"b{block}/"
        n_layers = self.D_base if block == 1 else self.D_res
        shapes = []
        fan_in = self.block_input_width(block)
        for i in range(n_layers):
            shapes += [(f"{P}layer{i}/w", (fan_in, W)), (f"{P}layer{i}/b", (W,))]
            fan_in = W
        Wc = self.color_hidden
        shapes += [
            (f"{P}sigma/w", (W, 1)),
            (f"{P}sigma/b", (1,)),
            (f"{P}rgb_hidden/w", (W + self.encoding.dir_width, Wc)),
            (f"{P}rgb_hidden/b", (Wc,)),
            (f"{P}rgb_out/w", (Wc, 3)),
            (f"{P}rgb_out/b", (3,)),
        ]
        return shapes


@dataclasses.dataclass
class FieldParams:
    config: FieldConfig
    params: ParamVector
    depth: int

    @property
    def size(self) -> int:
        return self.params.size

    def block_names(self, block: int) -> list[str]:
        return [n for n, _ in self.config.block_shapes(block)]


@dataclasses.dataclass
class HeadOutput:
    density: Node  # (P,) rectified aggregate
    color: Node  # (P, 3) in [0, 1]
    raw_density: Node  # this head's own raw output, before aggregation
    raw_color: Node


_FINAL_LAYERS = ("sigma", "rgb_out")


def _init_block(pv: ParamVector, config: FieldConfig, block: int, rng: np.random.Generator, zero_head: bool):
    for name, shape in config.block_shapes(block):
        if name.endswith("/b"):
            value = np.zeros(shape)
        elif zero_head and name.split("/")[1] in _FINAL_LAYERS:
            value = np.zeros(shape)
        else:
            value = rng.normal(0.0, np.sqrt(2.0 / shape[0]), size=shape)
        pv.add(name, value)


def init_field(config: FieldConfig, rng: np.random.Generator, depth: int = 1, dtype=np.float64) -> FieldParams:
    """Base block only by default; ``depth > 1`` builds a fixed deeper model."""
    if not 1 <= depth <= config.L_max:
        raise ValueError(f"depth must lie in [1, {config.L_max}]")
    pv = ParamVector(np.float64)
    _init_block(pv, config, 1, rng, zero_head=False)
    field = FieldParams(config, pv, 1)
    for _ in range(depth - 1):
        field = grow(field, rng)
    if dtype != np.float64:
        field.params = field.params.astype(dtype)
    return field


def grow(field: FieldParams, rng: np.random.Generator) -> FieldParams:
    """Append one residual block plus head; existing parameters are copied untouched."""
    if field.depth >= field.config.L_max:
        raise ValueError(f"cannot grow past L_max={field.config.L_max}")
    new = ParamVector(np.float64)
    # residual heads start at zero so the new exit equals the previous one
    _init_block(new, field.config, field.depth + 1, rng, zero_head=field.config.residual)
    pv = field.params.copy()
    offset = pv.size
    pv.values = np.concatenate([pv.values, new.values.astype(pv.dtype)])
    for name, (start, stop, shape) in new.layout.items():
        pv.layout[name] = (start + offset, stop + offset, shape)
    return FieldParams(field.config, pv, field.depth + 1)


def _dense(tape: Tape, x: Node, prefix: str) -> Node:
    return tape.affine(x, tape.param(prefix + "/w"), tape.param(prefix + "/b"))


def forward(tape: Tape, field: FieldParams, gx, gd, exit_head: int | None = None) -> list[HeadOutput]:
    """Evaluate heads 1..exit_head on encoded points.

    ``gx`` is (P, 6 M_pos), ``gd`` is (P, 6 M_dir). Returns one
    :class:`HeadOutput` per head; the last entry is the requested exit.
    """
    cfg = field.config
    if exit_head is None:
        exit_head = field.depth
    if not 1 <= exit_head <= field.depth:
        raise ValueError(f"exit_head {exit_head} outside [1, {field.depth}]")
    dtype = field.params.dtype
    gx = tape.constant(np.asarray(gx, dtype=dtype))
    gd = tape.constant(np.asarray(gd, dtype=dtype))
    outputs = []
    z = None
    sum_sigma = sum_rgb = None
    for block in range(1, exit_head + 1):
        P = f"b{block}/"
        if block == 1:
            h = gx
            n_layers = cfg.D_base
        else:
            h = tape.concat([z, gx]) if cfg.skip else z
            n_layers = cfg.D_res
        for i in range(n_layers):
            h = tape.relu(_dense(tape, h, f"{P}layer{i}"))
        z = h
        raw_sigma = tape.reshape(_dense(tape, z, P + "sigma"), (-1,))
        c_in = tape.concat([z, gd]) if cfg.encoding.M_dir > 0 else z
        c_hidden = tape.relu(_dense(tape, c_in, P + "rgb_hidden"))
        raw_rgb = _dense(tape, c_hidden, P + "rgb_out")
        if cfg.residual and block > 1:
            sum_sigma = sum_sigma + raw_sigma
            sum_rgb = sum_rgb + raw_rgb
        else:
            sum_sigma, sum_rgb = raw_sigma, raw_rgb
        outputs.append(HeadOutput(tape.relu(sum_sigma), tape.sigmoid(sum_rgb), raw_sigma, raw_rgb))
    return outputs


def evaluate(field: FieldParams, gx, gd, exit_head: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Non-recording convenience: (density (P,), color (P, 3)) at ``exit_head``."""
    tape = Tape(field.params, record=False)
    out = forward(tape, field, gx, gd, exit_head)[-1]
    return out.density.value, out.color.value


def parameter_count(config: FieldConfig, depth: int) -> int:
    return sum(int(np.prod(s)) for b in range(1, depth + 1) for _, s in config.block_shapes(b))


def save_params(field: FieldParams, path) -> None:
    """Write a little-endian container: header, config JSON, then float64 segments."""
    cfg = json.dumps(field.config.to_dict(), sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<III", FORMAT_VERSION, field.depth, len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(field.params.layout)))
    for name, (start, stop, shape) in field.params.layout.items():
        key = name.encode()
        buf.write(struct.pack("<H", len(key)))
        buf.write(key)
        buf.write(struct.pack("<B", len(shape)))
        buf.write(struct.pack(f"<{len(shape)}I", *shape))
        buf.write(field.params.values[start:stop].astype("<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FieldLoadError(f"{self.path}: truncated at byte {self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_params(path, config: FieldConfig | None = None, dtype=np.float64) -> FieldParams:
    """Read a file written by :func:`save_params`.

    If ``config`` is given it must match the stored one. Segment shapes are
    always validated against the stored architecture.
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise FieldLoadError(f"{path}: {exc}") from exc
    r = _Reader(data, path)
    if r.take(4) != MAGIC:
        raise FieldLoadError(f"{path}: not a parameter file")
    version, depth, cfg_len = r.unpack("<III")
    if version != FORMAT_VERSION:
        raise FieldLoadError(f"{path}: unsupported version {version}")
    try:
        stored = FieldConfig.from_dict(json.loads(r.take(cfg_len)))
    except (ValueError, TypeError, KeyError) as exc:
        raise FieldLoadError(f"{path}: bad config header: {exc}") from exc
    if config is not None and config != stored:
        raise FieldLoadError(f"{path}: config mismatch: file has {stored}, expected {config}")
    if not 1 <= depth <= stored.L_max:
        raise FieldLoadError(f"{path}: depth {depth} outside [1, {stored.L_max}]")
    expected = [s for b in range(1, depth + 1) for s in stored.block_shapes(b)]
    (count,) = r.unpack("<I")
    if count != len(expected):
        raise FieldLoadError(f"{path}: {count} segments, expected {len(expected)}")
    pv = ParamVector(np.float64)
    for exp_name, exp_shape in expected:
        (klen,) = r.unpack("<H")
        name = r.take(klen).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        if name != exp_name or tuple(shape) != exp_shape:
            raise FieldLoadError(
                f"{path}: shape mismatch for {name}: stored {tuple(shape)}, expected {exp_name} {exp_shape}"
            )
        n = int(np.prod(shape))
        pv.add(name, np.frombuffer(r.take(8 * n), dtype="<f8").reshape(shape))
    if r.pos != len(data):
        raise FieldLoadError(f"{path}: {len(data) - r.pos} trailing bytes")
    if not np.all(np.isfinite(pv.values)):
        raise FieldLoadError(f"{path}: non-finite parameters")
    field = FieldParams(stored, pv, depth)
    if dtype != np.float64:
        field.params = field.params.astype(dtype)
    return field
