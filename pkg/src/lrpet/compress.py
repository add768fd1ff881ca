"""Post-training factorization, FLOPs/parameter accounting, and the model file format."""

from __future__ import annotations

import json
import logging
import os
import struct
import tempfile
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .lrpet import PlanError, RankPlan
from .nn import BatchNorm, Conv2d, Linear, Network, ResidualAdd, layer_from_dict, layer_to_dict
from .tensor import svd

log = logging.getLogger(__name__)

MAGIC = b"LRPT"
FORMAT_VERSION = 1


class FormatError(ValueError):
    pass


# ---------------------------------------------------------------- accounting


def layer_macs(layer, in_shape, out_shape) -> int:
    if isinstance(layer, Conv2d):
        c_out, ho, wo = out_shape
        return layer.c_out * layer.c_in * layer.kh * layer.kw * ho * wo
    if isinstance(layer, Linear):
        return layer.n_in * layer.n_out
    return 0


def count_flops(net: Network) -> dict:
    """Multiply-accumulate counts per layer for one input sample.

    Only convolutions (including 1x1 residual projections) and linear layers
    are counted; BN, activations, pooling and bias adds are left out.
    """
    per_layer = {}
    for i, layer in enumerate(net.layers):
        if isinstance(layer, ResidualAdd):
            w = net.params.get(f"{i}.weight")
            macs = 0 if w is None else w.shape[0] * w.shape[1] * net.shapes[i + 1][1] * net.shapes[i + 1][2]
        else:
            macs = layer_macs(layer, net.shapes[i], net.shapes[i + 1])
        if macs:
            per_layer[i] = macs
    return {"per_layer": per_layer, "total": int(sum(per_layer.values()))}


@dataclass
class LayerReport:
    index: int
    name: str
    shape: tuple  # (m, n) of the weight matrix
    rank: int
    params_before: int
    params_after: int
    flops_before: int
    flops_after: int


@dataclass
class CompressionReport:
    layers: list[LayerReport] = field(default_factory=list)
    params_before: int = 0  # D_ori: all trainable parameters of the dense model
    params_after: int = 0  # D(p): all parameters of the factorized model
    flops_before: int = 0
    flops_after: int = 0

    @property
    def compression_rate(self) -> float:
        return self.params_after / self.params_before

    @property
    def pr_params(self) -> float:
        return 1.0 - self.params_after / self.params_before

    @property
    def pr_flops(self) -> float:
        return 1.0 - self.flops_after / self.flops_before

    @property
    def flops_speedup(self) -> float:
        return self.flops_before / self.flops_after

    def to_dict(self) -> dict:
        return {
            "layers": [asdict(l) for l in self.layers],
            "params_before": self.params_before,
            "params_after": self.params_after,
            "flops_before": self.flops_before,
            "flops_after": self.flops_after,
            "compression_rate": self.compression_rate,
            "pr_params": self.pr_params,
            "pr_flops": self.pr_flops,
            "flops_speedup": self.flops_speedup,
        }

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            atomic_write(path, text.encode())
        return text

    def table(self) -> str:
        head = f"{'layer':<14}{'m x n':>12}{'rank':>6}{'params':>20}{'MACs':>26}"
        lines = [head, "-" * len(head)]
        for l in self.layers:
            lines.append(
                f"{l.name:<14}{f'{l.shape[0]}x{l.shape[1]}':>12}{l.rank:>6}"
                f"{f'{l.params_before} -> {l.params_after}':>20}"
                f"{f'{l.flops_before} -> {l.flops_after}':>26}"
            )
        lines.append("-" * len(head))
        lines.append(
            f"params {self.params_before} -> {self.params_after} (PR {100 * self.pr_params:.2f}%), "
            f"MACs {self.flops_before} -> {self.flops_after} (PR {100 * self.pr_flops:.2f}%), "
            f"C = {self.compression_rate:.4f}"
        )
        return "\n".join(lines)


def compression_report(net: Network, plan: RankPlan) -> CompressionReport:
    """Account for factorizing ``net`` under ``plan`` without building it."""
    ranks = plan.ranks(net)
    flops = count_flops(net)["per_layer"]
    report = CompressionReport(params_before=net.num_params(), flops_before=int(sum(flops.values())))
    after_params = 0
    after_flops = 0
    folded = set()
    for i, layer in enumerate(net.layers):
        if i in folded:
            continue
        p = net.layer_params(i)
        if i in ranks:
            r = ranks[i]
            m, n = net.weight_matrix(i).shape
            bn = net.following_bn(i)
            if bn is not None:
                folded.add(bn)
            has_bias = bn is not None or "bias" in p
            before_f = flops[i]
            spatial = before_f // (m * n)
            after_f = (m + n) * r * spatial
            report.layers.append(
                LayerReport(i, f"L{i}:{type(layer).__name__}", (m, n), r, m * n, (m + n) * r, before_f, after_f)
            )
            after_params += (m + n) * r + (m if has_bias else 0)
            after_flops += after_f
        else:
            after_params += sum(v.size for v in p.values())
            after_flops += flops.get(i, 0)
    report.params_after = int(after_params)
    report.flops_after = int(after_flops)
    return report


# ---------------------------------------------------------------- factorization


def fold_layer(net: Network, i: int):
    """Effective (weight matrix, bias) of layer ``i`` with any trailing BN merged in."""
    w = net.weight_matrix(i)
    b = net.params.get(f"{i}.bias")
    b = np.zeros(w.shape[0]) if b is None else b.copy()
    j = net.following_bn(i)
    if j is None:
        return w.copy(), (b if f"{i}.bias" in net.params else None)
    bn = net.layers[j]
    buf = net.layer_buffers(j)
    d = net.params[f"{j}.weight"] / bn.sigma(buf)
    bias = net.params[f"{j}.bias"] + d * (b - buf["running_mean"])
    return d[:, None] * w, bias


def truncate_and_factor(net: Network, plan: RankPlan, warn_tol: float = 0.05):
    """Replace every planned layer (and its BN) by two cascaded low-rank layers.

    A conv becomes a kh x kw conv with r outputs followed by a 1x1 conv that
    carries the folded bias; a linear layer becomes two linear layers.
    """
    ranks = plan.ranks(net)
    report = compression_report(net, plan)
    layers, params, buffers = [], {}, {}
    act_map = {0: 0}  # old activation index -> new activation index
    skip = set()

    def put(layer, p=None, b=None):
        k = len(layers)
        layers.append(layer)
        for name, v in (p or {}).items():
            params[f"{k}.{name}"] = np.array(v, dtype=np.float64)
        for name, v in (b or {}).items():
            buffers[f"{k}.{name}"] = np.array(v, dtype=np.float64)

    for i, layer in enumerate(net.layers):
        if i in skip:
            act_map[i + 1] = len(layers)
            continue
        if i in ranks:
            r = ranks[i]
            m, n = net.weight_matrix(i).shape
            if not 1 <= r <= min(m, n):
                raise PlanError(f"layer {i}: rank {r} exceeds min({m}, {n})")
            w, bias = fold_layer(net, i)
            f = svd(w)
            root = np.sqrt(f.s[:r])
            left = f.u[:, :r] * root  # m x r
            right = root[:, None] * f.v[:, :r].T  # r x n
            tail = f.s[r:]
            if tail.size and np.sqrt(np.sum(tail**2)) > warn_tol * np.sqrt(np.sum(f.s**2)):
                log.warning("layer %d: discarding %.1f%% of the energy; was it trained with this plan?",
                            i, 100 * np.sum(tail**2) / np.sum(f.s**2))
            j = net.following_bn(i)
            if j is not None:
                skip.add(j)
            out_bias = {} if bias is None else {"bias": bias}
            if isinstance(layer, Conv2d):
                put(Conv2d(layer.c_in, r, layer.kh, layer.kw, layer.stride, layer.pad, bias=False),
                    {"weight": right.reshape(r, layer.c_in, layer.kh, layer.kw)})
                put(Conv2d(r, layer.c_out, 1, 1, bias=bias is not None),
                    {"weight": left.reshape(layer.c_out, r, 1, 1), **out_bias})
            else:
                put(Linear(layer.n_in, r, bias=False), {"weight": right})
                put(Linear(r, layer.n_out, bias=bias is not None), {"weight": left, **out_bias})
            # with a BN the pre-BN activation no longer exists
            act_map[i + 1] = len(layers) if j is None else None
            continue
        if isinstance(layer, ResidualAdd):
            src = act_map.get(layer.source)
            if src is None:
                raise PlanError(f"layer {i}: residual source {layer.source} was folded away")
            layer = ResidualAdd(src, layer.shortcut)
        put(layer, net.layer_params(i), net.layer_buffers(i))
        act_map[i + 1] = len(layers)

    out = Network(layers, net.input_shape, params=params, buffers=buffers)
    out.eval()
    if out.num_params() != report.params_after:
        raise AssertionError("accounting disagrees with the factorized network")
    return out, report


# ---------------------------------------------------------------- model files


def atomic_write(path, payload: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_model(net: Network, meta: dict | None = None) -> bytes:
    names_p = list(net.params)
    names_b = list(net.buffers)
    manifest = {
        "input_shape": list(net.input_shape),
        "layers": [layer_to_dict(l) for l in net.layers],
        "params": [[k, list(net.params[k].shape)] for k in names_p],
        "buffers": [[k, list(net.buffers[k].shape)] for k in names_b],
        "training": net.training,
        "meta": meta or {},
    }
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<HI", FORMAT_VERSION, len(head)), head]
    for k in names_p:
        parts.append(np.ascontiguousarray(net.params[k], dtype="<f8").tobytes())
    for k in names_b:
        parts.append(np.ascontiguousarray(net.buffers[k], dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_model(raw: bytes):
    if len(raw) < 14 or raw[:4] != MAGIC:
        raise FormatError("not an LRPT model file")
    version, size = struct.unpack("<HI", raw[4:10])
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}")
    (crc,) = struct.unpack("<I", raw[-4:])
    body = raw[:-4]
    if 10 + size > len(body):
        raise FormatError("file truncated inside the manifest")
    if zlib.crc32(body) != crc:
        raise FormatError("checksum mismatch")
    manifest = json.loads(body[10 : 10 + size].decode("utf-8"))
    pos = 10 + size
    tensors = {}
    for group in ("params", "buffers"):
        out = {}
        for name, shape in manifest[group]:
            count = int(np.prod(shape))
            end = pos + 8 * count
            if end > len(body):
                raise FormatError(f"file truncated in tensor {name}")
            out[name] = np.frombuffer(body[pos:end], dtype="<f8").astype(np.float64).reshape(shape)
            pos = end
        tensors[group] = out
    if pos != len(body):
        raise FormatError("trailing bytes after the last tensor")
    layers = [layer_from_dict(d) for d in manifest["layers"]]
    net = Network(layers, manifest["input_shape"], params=tensors["params"], buffers=tensors["buffers"])
    net.training = bool(manifest.get("training", False))
    return net, manifest.get("meta", {})


def save_model(net: Network, path, meta: dict | None = None):
    atomic_write(path, encode_model(net, meta))


def load_model(path, with_meta=False):
    net, meta = decode_model(Path(path).read_bytes())
    return (net, meta) if with_meta else net
