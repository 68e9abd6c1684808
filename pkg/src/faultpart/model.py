"""Layered quantized DNN graphs: specs, validation, shapes, and disk format.

A model is an ordered list of layers indexed 1..L. Layer inputs refer to
producer indices; index 0 is the external input, consumed by exactly one
layer. Supported kinds cover plain CNN chains plus two-input residual adds.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .qtensor import QuantTensor, load_tensor, save_tensor

LAYER_KINDS = (
    "conv2d",
    "fully_connected",
    "relu",
    "maxpool",
    "avgpool_global",
    "residual_add",
    "flatten",
)

WEIGHTED_KINDS = ("conv2d", "fully_connected")

_REQUIRED_PARAMS = {
    "conv2d": ("out_channels", "kernel", "stride", "padding", "out_scale_exp"),
    "fully_connected": ("units", "out_scale_exp"),
    "maxpool": ("kernel", "stride"),
    "relu": (),
    "avgpool_global": (),
    "residual_add": (),
    "flatten": (),
}


class ModelError(ValueError):
    """Model manifest or graph validation failure."""


@dataclass(frozen=True)
class LayerSpec:
    index: int
    kind: str
    params: dict = field(default_factory=dict)
    inputs: tuple[int, ...] = (0,)
    weights: QuantTensor | None = None
    bias: QuantTensor | None = None

    def __post_init__(self):
        object.__setattr__(self, "inputs", tuple(int(i) for i in self.inputs))


@dataclass(frozen=True)
class ModelGraph:
    name: str
    input_shape: tuple[int, ...]
    input_scale_exp: int
    num_classes: int
    bit_width: int = 16
    layers: tuple[LayerSpec, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))

    @property
    def num_layers(self) -> int:
        return len(self.layers)


@dataclass(frozen=True)
class LabeledDataset:
    """Samples of (input tensor, class label). Never empty."""

    samples: tuple[tuple[QuantTensor, int], ...]
    name: str

    def __post_init__(self):
        if not self.samples:
            raise ModelError("dataset is empty")
        object.__setattr__(
            self, "samples", tuple((t, int(l)) for t, l in self.samples)
        )

    def __len__(self) -> int:
        return len(self.samples)

    def subset(self, n: int | None) -> "LabeledDataset":
        """First n samples; None or oversize means the full set."""
        if n is None or n >= len(self.samples):
            return self
        return LabeledDataset(self.samples[:n], f"{self.name}[:{n}]")


# ---------------------------------------------------------------------------
# Validation and shape/scale inference
# ---------------------------------------------------------------------------

def _conv_out_hw(h: int, w: int, kernel: int, stride: int, padding: int) -> tuple[int, int]:
    ho = (h + 2 * padding - kernel) // stride + 1
    wo = (w + 2 * padding - kernel) // stride + 1
    return ho, wo


def _layer_error(layer: LayerSpec, msg: str) -> ModelError:
    return ModelError(f"layer {layer.index} ({layer.kind}): {msg}")


def _infer_layer(layer: LayerSpec, in_shapes, in_scales):
    """Output (shape, scale_exp) of one layer given its input metadata."""
    kind = layer.kind
    if kind == "conv2d":
        (c, h, w) = in_shapes[0]
        p = layer.params
        ho, wo = _conv_out_hw(h, w, p["kernel"], p["stride"], p["padding"])
        if ho <= 0 or wo <= 0:
            raise _layer_error(layer, f"inferred output {ho}x{wo} not positive")
        return (p["out_channels"], ho, wo), p["out_scale_exp"]
    if kind == "fully_connected":
        n = int(np.prod(in_shapes[0]))
        if len(in_shapes[0]) != 1:
            raise _layer_error(layer, f"expects flat input, got {in_shapes[0]}")
        return (layer.params["units"],), layer.params["out_scale_exp"]
    if kind == "relu":
        return in_shapes[0], in_scales[0]
    if kind == "maxpool":
        (c, h, w) = in_shapes[0]
        p = layer.params
        ho = (h - p["kernel"]) // p["stride"] + 1
        wo = (w - p["kernel"]) // p["stride"] + 1
        if ho <= 0 or wo <= 0:
            raise _layer_error(layer, f"inferred output {ho}x{wo} not positive")
        return (c, ho, wo), in_scales[0]
    if kind == "avgpool_global":
        (c, h, w) = in_shapes[0]
        return (c,), in_scales[0]
    if kind == "residual_add":
        if in_shapes[0] != in_shapes[1]:
            raise _layer_error(
                layer, f"input shapes differ: {in_shapes[0]} vs {in_shapes[1]}"
            )
        if in_scales[0] != in_scales[1]:
            raise _layer_error(
                layer, f"input scales differ: {in_scales[0]} vs {in_scales[1]}"
            )
        return in_shapes[0], in_scales[0]
    if kind == "flatten":
        return (int(np.prod(in_shapes[0])),), in_scales[0]
    raise _layer_error(layer, "unsupported kind")


def _expected_weight_shape(layer: LayerSpec, in_shape) -> tuple[int, ...]:
    if layer.kind == "conv2d":
        p = layer.params
        return (p["out_channels"], in_shape[0], p["kernel"], p["kernel"])
    return (layer.params["units"], in_shape[0])


def validate_model(model: ModelGraph) -> tuple[list[tuple[int, ...]], list[int]]:
    """Full structural pass; returns per-layer (shapes, scale_exps).

    Raises ModelError naming the offending layer on any violation.
    """
    if model.num_layers == 0:
        raise ModelError("model has no layers")
    shapes: dict[int, tuple[int, ...]] = {0: model.input_shape}
    scales: dict[int, int] = {0: model.input_scale_exp}
    external_consumers = 0

    for pos, layer in enumerate(model.layers, start=1):
        if layer.index != pos:
            raise ModelError(
                f"layer at position {pos} has index {layer.index}; expected {pos}"
            )
        if layer.kind not in LAYER_KINDS:
            raise _layer_error(layer, "unsupported kind")
        missing = [k for k in _REQUIRED_PARAMS[layer.kind] if k not in layer.params]
        if missing:
            raise _layer_error(layer, f"missing params {missing}")
        want_inputs = 2 if layer.kind == "residual_add" else 1
        if len(layer.inputs) != want_inputs:
            raise _layer_error(
                layer, f"expects {want_inputs} input(s), got {len(layer.inputs)}"
            )
        for src in layer.inputs:
            if not 0 <= src < layer.index:
                raise _layer_error(layer, f"dangling input index {src}")
        external_consumers += layer.inputs.count(0)

        in_shapes = [shapes[s] for s in layer.inputs]
        in_scales = [scales[s] for s in layer.inputs]

        if layer.kind in WEIGHTED_KINDS:
            if layer.weights is None:
                raise _layer_error(layer, "missing weights")
            want = _expected_weight_shape(layer, in_shapes[0])
            if layer.weights.shape != want:
                raise _layer_error(
                    layer,
                    f"weight shape {layer.weights.shape} != expected {want}",
                )
            if layer.weights.bit_width != model.bit_width:
                raise _layer_error(
                    layer,
                    f"weight bit width {layer.weights.bit_width} != model "
                    f"{model.bit_width}",
                )
            n_out = want[0]
            if layer.bias is not None and layer.bias.shape != (n_out,):
                raise _layer_error(
                    layer, f"bias shape {layer.bias.shape} != ({n_out},)"
                )
        else:
            if layer.weights is not None or layer.bias is not None:
                raise _layer_error(layer, "unexpected weights on weightless kind")

        shapes[layer.index], scales[layer.index] = _infer_layer(
            layer, in_shapes, in_scales
        )

    if external_consumers != 1:
        raise ModelError(
            f"external input consumed by {external_consumers} layers; expected 1"
        )
    out_shape = shapes[model.num_layers]
    if out_shape != (model.num_classes,):
        raise ModelError(
            f"final output shape {out_shape} != ({model.num_classes},)"
        )
    return (
        [shapes[i] for i in range(1, model.num_layers + 1)],
        [scales[i] for i in range(1, model.num_layers + 1)],
    )


def shape_inference(model: ModelGraph) -> list[tuple[int, ...]]:
    """Per-layer output shapes in layer order."""
    shapes, _ = validate_model(model)
    return shapes


def layer_macs(model: ModelGraph) -> list[int]:
    """Multiply-accumulate count per layer; zero for unweighted kinds."""
    shapes, _ = validate_model(model)
    in_shape = {0: model.input_shape}
    for layer, shp in zip(model.layers, shapes):
        in_shape[layer.index] = shp
    macs = []
    for layer, out in zip(model.layers, shapes):
        if layer.kind == "conv2d":
            cin = in_shape[layer.inputs[0]][0]
            k = layer.params["kernel"]
            macs.append(int(np.prod(out)) * cin * k * k)
        elif layer.kind == "fully_connected":
            macs.append(layer.params["units"] * in_shape[layer.inputs[0]][0])
        else:
            macs.append(0)
    return macs


def layer_output_elements(model: ModelGraph) -> list[int]:
    return [int(np.prod(s)) for s in shape_inference(model)]


def layer_weight_bytes(model: ModelGraph) -> list[int]:
    """Stored parameter bytes (weights plus bias) per layer."""
    validate_model(model)
    out = []
    for layer in model.layers:
        n = 0
        if layer.weights is not None:
            n += layer.weights.size
        if layer.bias is not None:
            n += layer.bias.size
        out.append(n * model.bit_width // 8)
    return out


# ---------------------------------------------------------------------------
# Disk format: JSON manifest plus binary tensor files
# ---------------------------------------------------------------------------

def save_model(model: ModelGraph, outdir) -> Path:
    """Write model.json and tensors/*.aqt under outdir; returns manifest path."""
    validate_model(model)
    outdir = Path(outdir)
    (outdir / "tensors").mkdir(parents=True, exist_ok=True)
    manifest = {
        "name": model.name,
        "input_shape": list(model.input_shape),
        "input_scale_exp": model.input_scale_exp,
        "num_classes": model.num_classes,
        "bit_width": model.bit_width,
        "layers": [],
    }
    for layer in model.layers:
        entry = {
            "index": layer.index,
            "kind": layer.kind,
            "params": dict(layer.params),
            "inputs": list(layer.inputs),
        }
        if layer.weights is not None:
            rel = f"tensors/l{layer.index}_weight.aqt"
            save_tensor(layer.weights, outdir / rel)
            entry["weight_file"] = rel
        if layer.bias is not None:
            rel = f"tensors/l{layer.index}_bias.aqt"
            save_tensor(layer.bias, outdir / rel)
            entry["bias_file"] = rel
        manifest["layers"].append(entry)
    path = outdir / "model.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_model(path) -> ModelGraph:
    """Load and fully validate a model from its manifest (file or directory)."""
    path = Path(path)
    manifest_path = path / "model.json" if path.is_dir() else path
    if not manifest_path.exists():
        raise ModelError(f"model manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise ModelError(f"unparseable model manifest: {exc}") from exc
    base = manifest_path.parent
    layers = []
    for entry in manifest["layers"]:
        weights = bias = None
        if "weight_file" in entry:
            weights = load_tensor(base / entry["weight_file"])
        if "bias_file" in entry:
            bias = load_tensor(base / entry["bias_file"])
        layers.append(
            LayerSpec(
                index=entry["index"],
                kind=entry["kind"],
                params=entry.get("params", {}),
                inputs=tuple(entry.get("inputs", [0])),
                weights=weights,
                bias=bias,
            )
        )
    model = ModelGraph(
        name=manifest["name"],
        input_shape=tuple(manifest["input_shape"]),
        input_scale_exp=manifest["input_scale_exp"],
        num_classes=manifest["num_classes"],
        bit_width=manifest.get("bit_width", 16),
        layers=tuple(layers),
    )
    validate_model(model)
    return model


def save_dataset(dataset: LabeledDataset, outdir) -> Path:
    """Write one tensor file per sample plus a labels.csv index."""
    outdir = Path(outdir)
    (outdir / "samples").mkdir(parents=True, exist_ok=True)
    rows = []
    for i, (tensor, label) in enumerate(dataset.samples):
        sample_id = f"{i:05d}"
        save_tensor(tensor, outdir / "samples" / f"{sample_id}.aqt")
        rows.append((sample_id, label))
    labels_path = outdir / "labels.csv"
    with open(labels_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for sample_id, label in rows:
            writer.writerow([sample_id, label])
    return labels_path


def load_dataset(path, name: str | None = None) -> LabeledDataset:
    path = Path(path)
    labels_path = path / "labels.csv"
    if not labels_path.exists():
        raise ModelError(f"labels index not found: {labels_path}")
    samples = []
    with open(labels_path, newline="") as fh:
        for row in csv.reader(fh):
            if not row:
                continue
            sample_id, label = row[0], int(row[1])
            tensor = load_tensor(path / "samples" / f"{sample_id}.aqt")
            samples.append((tensor, label))
    return LabeledDataset(tuple(samples), name or path.name)
