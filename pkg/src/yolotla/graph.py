"""Model assembly: config parsing, scaling, init, weight files, execution.

A model config is a JSON document with extension ``.cfg``::

    {
      "name": "...",
      "nc": 80,
      "depth_multiple": 0.33,
      "width_multiple": 0.50,
      "anchors": [[[w, h], [w, h], [w, h]], ...],   one row per detect scale
      "layers": [[from, repeats, kind, {args}], ...],
      "detect_from": [i, j, k]
    }

Channel args in ``layers`` are base widths; the build multiplies them by
``width_multiple`` and rounds up to a multiple of 8. ``repeats`` is scaled
by ``depth_multiple`` for the C3 family and must stay 1 elsewhere. The
prediction head is not a layer row: it is assembled from ``detect_from``,
``nc`` and the anchor table, one 1x1 conv per scale.

Parameters live in a flat dict keyed by path ("layers.4.cv1.conv.weight",
"detect.m0.conv.bias"). Initialization draws from a single seeded
generator in manifest order, so a rebuild with the same seed is
bit-identical. The weight file stores exactly those arrays and nothing
else, so the file's float count always equals the reported parameter
count.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import blocks as _blocks
from .errors import ConfigError, ParseError, ShapeError, WeightError
from .tensor import Tensor

WEIGHT_MAGIC = b"TLAW"
WEIGHT_VERSION = 1
INPUT_CHANNELS = 3
REFERENCE_SIDE = 640


def scale_channels(base: int, width_multiple: float) -> int:
    """Width scaling: multiply, then round up to a multiple of 8."""
    if base % 8:
        raise ConfigError(f"base channel count {base} is not a multiple of 8")
    return max(8, int(math.ceil(base * width_multiple / 8)) * 8)


def scale_repeats(base: int, depth_multiple: float) -> int:
    """Depth scaling: multiply and round, never below one repeat."""
    if base <= 1:
        return base
    return max(1, round(base * depth_multiple))


@dataclass(frozen=True)
class LayerSpec:
    index: int
    sources: tuple[int, ...]   # absolute indices; -1 resolved at parse time
    repeats: int
    kind: str
    args: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ModelConfig:
    name: str
    nc: int
    depth_multiple: float
    width_multiple: float
    anchors: tuple[tuple[tuple[float, float], ...], ...]
    layers: tuple[LayerSpec, ...]
    detect_from: tuple[int, ...]


_TOP_FIELDS = {"name", "nc", "depth_multiple", "width_multiple", "anchors",
               "layers", "detect_from"}


def _parse_anchors(raw) -> tuple:
    if not isinstance(raw, list) or not raw:
        raise ConfigError("anchors must be a non-empty list of scale rows")
    scales = []
    for si, row in enumerate(raw):
        if not isinstance(row, list) or len(row) != 3:
            raise ConfigError(
                f"anchors row {si} must hold exactly 3 (w, h) pairs")
        pairs = []
        for pair in row:
            if (not isinstance(pair, list) or len(pair) != 2
                    or not all(isinstance(v, (int, float)) and v > 0
                               for v in pair)):
                raise ConfigError(
                    f"anchors row {si} entry {pair!r} is not a positive "
                    f"(w, h) pair")
            pairs.append((float(pair[0]), float(pair[1])))
        scales.append(tuple(pairs))
    return tuple(scales)


def _parse_layer(index: int, row) -> LayerSpec:
    if not isinstance(row, list) or len(row) != 4:
        raise ConfigError(
            f"layer {index} must be [from, repeats, kind, args]")
    frm, repeats, kind, args = row
    sources = frm if isinstance(frm, list) else [frm]
    resolved = []
    for s in sources:
        if not isinstance(s, int):
            raise ConfigError(f"layer {index} source {s!r} is not an index")
        if index == 0:
            if s != -1:
                raise ConfigError(
                    "layer 0 must read the model input (from: -1), "
                    f"got {s}")
            resolved.append(-1)
            continue
        abs_s = index + s if s < 0 else s
        if not 0 <= abs_s < index:
            raise ConfigError(
                f"layer {index} references layer {s}, which does not "
                f"precede it")
        resolved.append(abs_s)
    if not isinstance(repeats, int) or repeats < 1:
        raise ConfigError(f"layer {index} repeats must be a positive integer")
    if kind == "Detect":
        raise ConfigError(
            "Detect is assembled from detect_from, not listed as a layer")
    if kind not in _blocks.BLOCKS:
        raise ConfigError(f"unknown block kind {kind!r} at layer {index}")
    if repeats > 1 and kind not in _blocks.C3_FAMILY:
        raise ConfigError(
            f"layer {index}: repeats apply only to the C3 family, not {kind}")
    if not isinstance(args, dict):
        raise ConfigError(f"layer {index} args must be an object")
    return LayerSpec(index, tuple(resolved), repeats, kind, dict(args))


def parse_config(source) -> ModelConfig:
    """Parse and validate a model config from a path, JSON text, or dict."""
    if isinstance(source, dict):
        doc = source
    else:
        text = Path(source).read_text()
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as e:
            raise ParseError(f"config {source} is not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigError("config root must be an object")
    missing = _TOP_FIELDS - set(doc)
    if missing:
        raise ConfigError(f"config is missing fields: {sorted(missing)}")
    unknown = set(doc) - _TOP_FIELDS
    if unknown:
        raise ConfigError(f"config has unknown fields: {sorted(unknown)}")
    nc = doc["nc"]
    if not isinstance(nc, int) or nc < 1:
        raise ConfigError(f"nc must be a positive integer, got {nc!r}")
    for fld in ("depth_multiple", "width_multiple"):
        v = doc[fld]
        if not isinstance(v, (int, float)) or v <= 0:
            raise ConfigError(f"{fld} must be a positive number, got {v!r}")
    anchors = _parse_anchors(doc["anchors"])
    if not isinstance(doc["layers"], list) or not doc["layers"]:
        raise ConfigError("layers must be a non-empty list")
    layers = tuple(_parse_layer(i, row) for i, row in enumerate(doc["layers"]))
    df = doc["detect_from"]
    if (not isinstance(df, list)
            or not all(isinstance(i, int) for i in df)):
        raise ConfigError("detect_from must be a list of layer indices")
    if len(df) != len(anchors):
        raise ConfigError(
            f"detect_from lists {len(df)} scales but anchors lists "
            f"{len(anchors)}")
    for i in df:
        if not 0 <= i < len(layers):
            raise ConfigError(f"detect_from references missing layer {i}")
    return ModelConfig(
        name=str(doc["name"]), nc=nc,
        depth_multiple=float(doc["depth_multiple"]),
        width_multiple=float(doc["width_multiple"]),
        anchors=anchors, layers=layers, detect_from=tuple(df))


def bundled_config_names() -> list[str]:
    """Names of the configs shipped inside the package, without extension."""
    root = resources.files("yolotla.configs")
    return sorted(p.name[:-4] for p in root.iterdir() if p.name.endswith(".cfg"))


def find_config(name_or_path) -> Path:
    """Resolve a config argument: an existing path wins, else a bundled name."""
    p = Path(name_or_path)
    if p.exists():
        return p
    stem = p.name if p.name.endswith(".cfg") else p.name + ".cfg"
    bundled = resources.files("yolotla.configs") / stem
    with resources.as_file(bundled) as real:
        if real.exists():
            return real
    raise ConfigError(
        f"no config file at {name_or_path!r} and no bundled config named "
        f"{stem!r} (bundled: {', '.join(bundled_config_names())})")


def init_params(specs, seed: int) -> dict[str, np.ndarray]:
    """Fresh parameters: norm affines are identity, the rest uniform.

    Weights draw from U(-b, b) with b = 1/sqrt(fan_in); a bias reuses the
    bound of the weight preceding it in the manifest. One generator,
    manifest order, so the result is a pure function of (manifest, seed).
    """
    rng = np.random.default_rng(seed)
    out: dict[str, np.ndarray] = {}
    bound = 1.0
    for path, shape in specs:
        if path in out:
            raise ConfigError(f"duplicate parameter path {path}")
        if path.endswith("norm.scale"):
            out[path] = np.ones(shape, dtype=np.float32)
        elif path.endswith("norm.shift"):
            out[path] = np.zeros(shape, dtype=np.float32)
        else:
            if path.endswith(".weight"):
                fan_in = int(np.prod(shape[1:]))
                bound = 1.0 / math.sqrt(fan_in)
            out[path] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
    return out


class Model:
    """An executable layer graph plus its parameter store."""

    def __init__(self, config: ModelConfig, seed: int = 0,
                 params: dict[str, np.ndarray] | None = None):
        self.config = config
        self.nc = config.nc
        self.blocks: list[_blocks.Block] = []
        channels: list[int] = []
        for spec in config.layers:
            if spec.index == 0:
                cins = [INPUT_CHANNELS]
            else:
                cins = [channels[s] for s in spec.sources]
            args = dict(spec.args)
            if "out" in args:
                args["out"] = scale_channels(args["out"],
                                             config.width_multiple)
            if spec.kind in _blocks.C3_FAMILY:
                args["n"] = scale_repeats(spec.repeats, config.depth_multiple)
            try:
                block = _blocks.BLOCKS[spec.kind](cins, args)
            except ConfigError as e:
                raise ConfigError(f"layer {spec.index} ({spec.kind}): {e}") from e
            self.blocks.append(block)
            channels.append(block.out_channels)
        self.detect = _blocks.Detect(
            [channels[i] for i in config.detect_from], {"nc": config.nc})
        self.detect_from = config.detect_from
        self.anchors = [np.array(row, dtype=np.float64)
                        for row in config.anchors]
        self._keep = self._compute_keep()
        self.strides = self._infer_strides()
        self.params = params if params is not None else init_params(
            self.param_specs(), seed)
        self._bind()

    # -- structure ---------------------------------------------------------

    def _compute_keep(self) -> set[int]:
        keep = set(self.detect_from)
        for spec in self.config.layers:
            for s in spec.sources:
                if s >= 0:
                    keep.add(s)
        return keep

    def layer_out_shapes(self, input_shape) -> list[tuple[int, int, int, int]]:
        """Shape-infer every layer output for a given input shape."""
        n, c, h, w = input_shape
        if c != INPUT_CHANNELS:
            raise ShapeError(
                f"model expects {INPUT_CHANNELS} input channels, got {c}")
        shapes: list[tuple[int, int, int, int]] = []
        for spec, block in zip(self.config.layers, self.blocks):
            ins = ([tuple(input_shape)] if spec.index == 0
                   else [shapes[s] for s in spec.sources])
            shapes.append(block.out_shape(ins))
        return shapes

    def head_shapes(self, input_shape) -> list[tuple[int, int, int, int]]:
        shapes = self.layer_out_shapes(input_shape)
        return self.detect.out_shapes([shapes[i] for i in self.detect_from])

    def _infer_strides(self) -> tuple[int, ...]:
        side = REFERENCE_SIDE
        shapes = self.layer_out_shapes((1, INPUT_CHANNELS, side, side))
        strides = []
        for i in self.detect_from:
            h = shapes[i][2]
            if side % h:
                raise ConfigError(
                    f"detect layer {i} produces a {h}-row map at input "
                    f"{side}; stride is not integral")
            strides.append(side // h)
        if len(set(strides)) != len(strides):
            raise ConfigError(f"detect scales share a stride: {strides}")
        return tuple(strides)

    def param_specs(self) -> list[tuple[str, tuple[int, ...]]]:
        specs: list[tuple[str, tuple[int, ...]]] = []
        for i, block in enumerate(self.blocks):
            specs.extend(block.param_specs(f"layers.{i}"))
        specs.extend(self.detect.param_specs("detect"))
        return specs

    def param_count(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.param_specs())

    def _bind(self) -> None:
        specs = self.param_specs()
        expected = {p: tuple(s) for p, s in specs}
        missing = sorted(set(expected) - set(self.params))
        if missing:
            raise WeightError(f"missing parameter {missing[0]} "
                              f"({len(missing)} missing in total)")
        extra = sorted(set(self.params) - set(expected))
        if extra:
            raise WeightError(f"unexpected parameter {extra[0]} "
                              f"({len(extra)} unexpected in total)")
        for path, shape in expected.items():
            got = tuple(self.params[path].shape)
            if got != shape:
                raise WeightError(
                    f"parameter {path} has shape {got}, expected {shape}")
        getw = self.params.__getitem__
        for i, block in enumerate(self.blocks):
            block.load(getw, f"layers.{i}")
        self.detect.load(getw, "detect")

    # -- execution ---------------------------------------------------------

    def forward(self, x: Tensor) -> list[Tensor]:
        """Run the graph; returns one raw prediction map per detect scale."""
        n, c, h, w = x.shape
        if c != INPUT_CHANNELS:
            raise ShapeError(
                f"model expects {INPUT_CHANNELS} input channels, got {c}")
        max_stride = max(self.strides)
        if h % max_stride or w % max_stride:
            raise ShapeError(
                f"input {h}x{w} must be divisible by the largest stride "
                f"{max_stride}")
        cache: dict[int, Tensor] = {}
        for spec, block in zip(self.config.layers, self.blocks):
            ins = ([x] if spec.index == 0
                   else [cache[s] for s in spec.sources])
            out = block.forward(ins)
            if spec.index in self._keep:
                cache[spec.index] = out
        return self.detect.forward([cache[i] for i in self.detect_from])

    # -- weight files ------------------------------------------------------

    def save_weight_file(self, path) -> None:
        save_weights(path, self.params)

    def load_weight_file(self, path) -> None:
        raw = load_weights(path)
        expected = {p: tuple(s) for p, s in self.param_specs()}
        params: dict[str, np.ndarray] = {}
        for name, arr in raw.items():
            if name not in expected:
                raise WeightError(
                    f"weight file holds unexpected parameter {name}")
            want = expected[name]
            if int(np.prod(arr.shape)) != int(np.prod(want)):
                raise WeightError(
                    f"parameter {name} holds {int(np.prod(arr.shape))} "
                    f"values, expected shape {want}")
            params[name] = np.ascontiguousarray(arr).reshape(want)
        missing = sorted(set(expected) - set(params))
        if missing:
            raise WeightError(
                f"weight file is missing parameter {missing[0]} "
                f"({len(missing)} missing in total)")
        self.params = params
        self._bind()


def build_model(config_source, seed: int = 0) -> Model:
    cfg = (config_source if isinstance(config_source, ModelConfig)
           else parse_config(config_source))
    return Model(cfg, seed=seed)


def _pad4(shape: tuple[int, ...]) -> tuple[int, int, int, int]:
    if len(shape) > 4:
        raise WeightError(f"cannot store rank-{len(shape)} parameter")
    return tuple(list(shape) + [1] * (4 - len(shape)))


def save_weights(path, params: dict[str, np.ndarray]) -> None:
    """Write a weight file: entries sorted by path, shapes padded to rank 4."""
    with open(path, "wb") as fh:
        fh.write(WEIGHT_MAGIC)
        fh.write(struct.pack("<B", WEIGHT_VERSION))
        fh.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            arr = np.ascontiguousarray(params[name], dtype=np.float32)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<4I", *_pad4(arr.shape)))
            fh.write(arr.tobytes())


def load_weights(path) -> dict[str, np.ndarray]:
    """Read a weight file back into {path: rank-4 float32 array}."""
    blob = Path(path).read_bytes()
    if blob[:4] != WEIGHT_MAGIC:
        raise ParseError(
            f"{path} is not a weight file (magic {blob[:4]!r})")
    if len(blob) < 9:
        raise ParseError(f"{path} is truncated before the entry count")
    version = blob[4]
    if version != WEIGHT_VERSION:
        raise ParseError(f"{path} has unsupported version {version}")
    (count,) = struct.unpack_from("<I", blob, 5)
    off = 9
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        if off + 4 > len(blob):
            raise ParseError(f"{path} is truncated inside an entry header")
        (plen,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + plen].decode("utf-8")
        off += plen
        if off + 16 > len(blob):
            raise ParseError(f"{path} is truncated in dims of {name}")
        dims = struct.unpack_from("<4I", blob, off)
        off += 16
        numel = int(np.prod(dims))
        end = off + 4 * numel
        if end > len(blob):
            raise ParseError(f"{path} is truncated in payload of {name}")
        out[name] = np.frombuffer(
            blob[off:end], dtype="<f4").reshape(dims).astype(np.float32)
        off = end
    if off != len(blob):
        raise ParseError(f"{path} has {len(blob) - off} trailing bytes")
    return out


def weight_file_float_count(path) -> int:
    return sum(int(a.size) for a in load_weights(path).values())
