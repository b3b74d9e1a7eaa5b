"""Multi-stage spiking network assembly and the stage-wise forward pass.

A network is a list of stages (conv/BN/neuron units plus pooling), a
temporal transformer between consecutive stages, an early classifier fed by
each transformer output during training, and a final global-pool +
fully-connected head on the last stage. Inference touches only the backbone
and the head; the early classifiers exist purely to inject auxiliary losses
while training.

Supported architectures are a width-scalable VGG-9 and ResNet-18 (spiking
residual blocks sum after the neuron), plus a tiny `custom` stack for tests
and smoke runs.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tt
from .neuron import NeuronConfig, lif_forward_sequence
from .shrink import StagePlan, TemporalTransformer, overhead_count
from .tensor import BatchNormState, Tensor

_VGG9_CHANNELS = (64, 128, 256, 256, 512, 512, 512, 512)
_VGG9_POOL_AFTER = (2, 4, 6)  # 1-indexed conv units followed by avg pool
_VGG9_STAGE_SPLITS = {1: (8,), 2: (4, 4), 3: (3, 3, 2), 4: (2, 2, 2, 2),
                      5: (2, 2, 2, 1, 1)}
_RESNET18_STAGE_CHANNELS = (64, 128, 256, 512)
_RESNET18_UNITS = (5, 4, 4, 4)  # stem counted in stage 1


def derive_plan(arch: str, timesteps) -> StagePlan:
    """Stage plan with architecture-specific unit counts."""
    timesteps = tuple(int(t) for t in timesteps)
    n = len(timesteps)
    if arch == "vgg9":
        if n not in _VGG9_STAGE_SPLITS:
            raise ValueError(f"vgg9 supports 1..5 stages, got {n}")
        return StagePlan(timesteps, _VGG9_STAGE_SPLITS[n])
    if arch == "resnet18":
        if n != 4:
            raise ValueError(f"resnet18 is divided into 4 stages, got {n}")
        return StagePlan(timesteps, _RESNET18_UNITS)
    if arch == "custom":
        return StagePlan(timesteps, (1,) * n)
    raise ValueError(f"unknown architecture id {arch!r}")


@dataclass
class NetworkSpec:
    arch: str
    plan: StagePlan
    classes: int
    width_scale: int = 8
    in_channels: int = 2
    with_early_classifiers: bool = True
    tau: float = 2.0
    theta: float = 1.0
    surrogate_a: float = 1.0
    detach_reset: bool = False
    dtype: str = "f32"

    def __post_init__(self):
        if self.classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.classes}")
        if self.width_scale < 1:
            raise ValueError(f"width scale must be >= 1, got {self.width_scale}")


def _scaled(c: int, scale: int) -> int:
    return max(1, c // scale)


# ---------------------------------------------------------------------------
# layers

class ConvUnit:
    """conv -> batch norm -> spiking neuron, applied per timestep."""

    def __init__(self, name, c_in, c_out, rng, spec, stride=1, padding=1, k=3):
        dt = tt.DTYPES[spec.dtype]
        self.name = name
        self.stride, self.padding = stride, padding
        fan_in = c_in * k * k
        self.w = Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), (c_out, c_in, k, k))
                        .astype(dt), requires_grad=True, name=f"{name}.conv.w")
        self.b = Tensor(np.zeros(c_out, dt), requires_grad=True, name=f"{name}.conv.b")
        self.gamma = Tensor(np.ones(c_out, dt), requires_grad=True, name=f"{name}.bn.gamma")
        self.beta = Tensor(np.zeros(c_out, dt), requires_grad=True, name=f"{name}.bn.beta")
        self.bn_state = BatchNormState()
        self.cfg = NeuronConfig(tau=spec.tau, theta=spec.theta)
        self.a = spec.surrogate_a
        self.detach_reset = spec.detach_reset

    def params(self):
        return [self.w, self.b, self.gamma, self.beta]

    def forward(self, x, training, capture=None):
        z = tt.conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)
        z = tt.batch_norm(z, self.gamma, self.beta, self.bn_state, training)
        s = lif_forward_sequence(z, self.cfg, a=self.a, detach_reset=self.detach_reset)
        if capture is not None:
            capture.append((self.name, s.data))
        return s


class AvgPoolLayer:
    def __init__(self, k=2, stride=2):
        self.k, self.stride = k, stride

    def params(self):
        return []

    def forward(self, x, training, capture=None):
        return tt.avgpool2d(x, self.k, self.stride)


class ResBlock:
    """Two conv units with the neuron moved in front of the residual sum."""

    def __init__(self, name, c_in, c_out, rng, spec, stride=1):
        self.name = name
        self.unit1 = ConvUnit(f"{name}.u1", c_in, c_out, rng, spec, stride=stride)
        self.unit2 = ConvUnit(f"{name}.u2", c_out, c_out, rng, spec)
        self.shortcut = None
        if stride != 1 or c_in != c_out:
            dt = tt.DTYPES[spec.dtype]
            self.sc_w = Tensor(rng.normal(0.0, np.sqrt(2.0 / c_in), (c_out, c_in, 1, 1))
                               .astype(dt), requires_grad=True, name=f"{name}.sc.w")
            self.sc_b = Tensor(np.zeros(c_out, dt), requires_grad=True,
                               name=f"{name}.sc.b")
            self.sc_gamma = Tensor(np.ones(c_out, dt), requires_grad=True,
                                   name=f"{name}.sc.bn.gamma")
            self.sc_beta = Tensor(np.zeros(c_out, dt), requires_grad=True,
                                  name=f"{name}.sc.bn.beta")
            self.sc_bn = BatchNormState()
            self.sc_stride = stride
            self.shortcut = True

    def params(self):
        ps = self.unit1.params() + self.unit2.params()
        if self.shortcut:
            ps += [self.sc_w, self.sc_b, self.sc_gamma, self.sc_beta]
        return ps

    def forward(self, x, training, capture=None):
        out = self.unit1.forward(x, training, capture)
        out = self.unit2.forward(out, training, capture)
        if self.shortcut:
            sc = tt.conv2d(x, self.sc_w, self.sc_b, stride=self.sc_stride, padding=0)
            sc = tt.batch_norm(sc, self.sc_gamma, self.sc_beta, self.sc_bn, training)
        else:
            sc = x
        return tt.add(out, sc)


class EarlyClassifier:
    """conv 3x3/s1 -> spiking neuron -> global average pool -> fc."""

    def __init__(self, name, c_in, classes, rng, spec):
        dt = tt.DTYPES[spec.dtype]
        self.name = name
        fan_in = c_in * 9
        self.w = Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), (c_in, c_in, 3, 3))
                        .astype(dt), requires_grad=True, name=f"{name}.conv.w")
        self.b = Tensor(np.zeros(c_in, dt), requires_grad=True, name=f"{name}.conv.b")
        self.fc_w = Tensor(rng.normal(0.0, np.sqrt(1.0 / c_in), (classes, c_in))
                           .astype(dt), requires_grad=True, name=f"{name}.fc.w")
        self.fc_b = Tensor(np.zeros(classes, dt), requires_grad=True,
                           name=f"{name}.fc.b")
        self.cfg = NeuronConfig(tau=spec.tau, theta=spec.theta)
        self.a = spec.surrogate_a
        self.detach_reset = spec.detach_reset

    def params(self):
        return [self.w, self.b, self.fc_w, self.fc_b]

    def forward(self, x, training):
        z = tt.conv2d(x, self.w, self.b, stride=1, padding=1)
        s = lif_forward_sequence(z, self.cfg, a=self.a, detach_reset=self.detach_reset)
        return tt.linear(tt.global_avg_pool(s), self.fc_w, self.fc_b)


# ---------------------------------------------------------------------------
# the model

class SSNNModel:
    def __init__(self, spec, stages, transformers, ecs, fc_w, fc_b):
        self.spec = spec
        self.plan = spec.plan
        self.stages = stages
        self.transformers = transformers
        self.ecs = ecs
        self.fc_w = fc_w
        self.fc_b = fc_b
        self.training = True

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    def named_parameters(self):
        """Canonical (name, tensor) order: backbone, head, transformers, ECs."""
        out = []
        for stage in self.stages:
            for layer in stage:
                out.extend((p.name, p) for p in layer.params())
        out.append((self.fc_w.name, self.fc_w))
        out.append((self.fc_b.name, self.fc_b))
        for t in self.transformers:
            out.append((t.w.name, t.w))
        for ec in self.ecs:
            out.extend((p.name, p) for p in ec.params())
        return out

    def bn_states(self):
        out = []
        for stage in self.stages:
            for layer in stage:
                if isinstance(layer, (ConvUnit,)):
                    out.append((f"{layer.name}.bn", layer.bn_state))
                elif isinstance(layer, ResBlock):
                    out.append((f"{layer.unit1.name}.bn", layer.unit1.bn_state))
                    out.append((f"{layer.unit2.name}.bn", layer.unit2.bn_state))
                    if layer.shortcut:
                        out.append((f"{layer.name}.sc.bn", layer.sc_bn))
        return out

    def param_counts(self):
        backbone = sum(p.data.size for s in self.stages for l in s for p in l.params())
        head = self.fc_w.data.size + self.fc_b.data.size
        transformers = sum(t.w.data.size for t in self.transformers)
        ecs = sum(p.data.size for ec in self.ecs for p in ec.params())
        return {"backbone": backbone, "head": head, "transformers": transformers,
                "early_classifiers": ecs,
                "total": backbone + head + transformers + ecs}

    # -- forward passes ----------------------------------------------------

    def _check_input(self, x):
        if x.shape[0] != self.plan.timesteps[0]:
            raise ValueError(
                f"input has {x.shape[0]} timesteps but the plan starts at "
                f"T1={self.plan.timesteps[0]}"
            )

    def _run_stage(self, i, x, capture=None):
        for layer in self.stages[i]:
            x = layer.forward(x, self.training, capture)
        return x

    def _head(self, x):
        return tt.linear(tt.global_avg_pool(x), self.fc_w, self.fc_b)

    def _forward(self, x, with_ecs, capture=None):
        self._check_input(x)
        n = self.plan.n_stages
        ec_logits = []
        out = x
        for i in range(n - 1):
            out = self._run_stage(i, out, capture)
            out = self.transformers[i](out)
            if with_ecs and self.ecs:
                ec_logits.append(self.ecs[i].forward(out, self.training))
        out = self._run_stage(n - 1, out, capture)
        return ec_logits, self._head(out)

    def forward_train(self, x: Tensor):
        """Stage-wise pass returning (early-classifier logits, final logits).

        EC_i sees the transformer output with T_{i+1} timesteps; the final
        logits carry T_n timesteps and feed the rate decoder.
        """
        return self._forward(x, with_ecs=True)

    def forward_infer(self, x: Tensor) -> Tensor:
        """Backbone + head only; early classifiers are never evaluated."""
        if self.training:
            raise RuntimeError("forward_infer requires eval mode")
        _, final = self._forward(x, with_ecs=False)
        return final

    def firing_rates(self, x: Tensor):
        """Mean spike rate per spiking layer: (name, [C,H,W]) in [0,1]."""
        if self.training:
            raise RuntimeError("firing_rates requires eval mode")
        capture = []
        self._forward(x, with_ecs=False, capture=capture)
        return [(name, s.mean(axis=(0, 1))) for name, s in capture]

    def spike_telemetry(self, x: Tensor):
        """Per-stage spike counts and synaptic-operation estimates.

        A spike's fan-out is taken from the next parameterized layer it
        feeds (conv: Cout*kh*kw/stride^2, head fc: classes).
        """
        if self.training:
            raise RuntimeError("telemetry requires eval mode")
        capture = []
        self._forward(x, with_ecs=False, capture=capture)
        fanouts = self._fanouts()
        per_stage = {i: {"spikes": 0.0, "synops": 0.0} for i in range(self.plan.n_stages)}
        stage_of = self._stage_of_layer()
        for name, s in capture:
            count = float(s.sum())
            st = stage_of[name]
            per_stage[st]["spikes"] += count
            per_stage[st]["synops"] += count * fanouts[name]
        return per_stage

    def _conv_layers_in_order(self):
        seq = []
        for i, stage in enumerate(self.stages):
            for layer in stage:
                if isinstance(layer, ConvUnit):
                    seq.append((i, layer))
                elif isinstance(layer, ResBlock):
                    seq.append((i, layer.unit1))
                    seq.append((i, layer.unit2))
        return seq

    def _stage_of_layer(self):
        return {u.name: i for i, u in self._conv_layers_in_order()}

    def _fanouts(self):
        seq = [u for _, u in self._conv_layers_in_order()]
        fan = {}
        for here, nxt in zip(seq, seq[1:]):
            c_out, _, kh, kw = nxt.w.shape
            s = nxt.stride
            fan[here.name] = c_out * kh * kw / (s * s)
        fan[seq[-1].name] = float(self.fc_w.shape[0])
        return fan


def build_network(spec: NetworkSpec, seed: int) -> SSNNModel:
    """Deterministically initialized model for a spec.

    The backbone/head and the early classifiers draw from independent seed
    streams, so dropping the ECs leaves every shared parameter bit-identical.
    Transformer weights start at zero (uniform initial scores).
    """
    ss = np.random.SeedSequence(seed)
    bb_ss, ec_ss = ss.spawn(2)
    rng = np.random.default_rng(bb_ss)
    ec_rng = np.random.default_rng(ec_ss)
    dt = tt.DTYPES[spec.dtype]
    plan = spec.plan
    n = plan.n_stages

    stages, stage_out_channels = _build_backbone(spec, rng)

    fc_in = stage_out_channels[-1]
    fc_w = Tensor(rng.normal(0.0, np.sqrt(1.0 / fc_in), (spec.classes, fc_in))
                  .astype(dt), requires_grad=True, name="head.fc.w")
    fc_b = Tensor(np.zeros(spec.classes, dt), requires_grad=True, name="head.fc.b")

    transformers = [
        TemporalTransformer(plan.timesteps[i], plan.timesteps[i + 1], dtype=dt,
                            name=f"tt{i + 1}")
        for i in range(n - 1)
    ]
    ecs = []
    if spec.with_early_classifiers:
        ecs = [
            EarlyClassifier(f"ec{i + 1}", stage_out_channels[i], spec.classes,
                            ec_rng, spec)
            for i in range(n - 1)
        ]
    return SSNNModel(spec, stages, transformers, ecs, fc_w, fc_b)


def _build_backbone(spec, rng):
    plan = spec.plan
    if spec.arch == "vgg9":
        split = _VGG9_STAGE_SPLITS[plan.n_stages]
        if plan.units != split:
            raise ValueError(f"vgg9 with {plan.n_stages} stages needs units {split}")
        chans = [_scaled(c, spec.width_scale) for c in _VGG9_CHANNELS]
        stages, c_prev, unit_idx, out_ch = [], spec.in_channels, 0, []
        for n_units in split:
            layers = []
            for _ in range(n_units):
                unit_idx += 1
                c = chans[unit_idx - 1]
                layers.append(ConvUnit(f"stage{len(stages) + 1}.u{unit_idx}",
                                       c_prev, c, rng, spec))
                c_prev = c
                if unit_idx in _VGG9_POOL_AFTER:
                    layers.append(AvgPoolLayer(2, 2))
            stages.append(layers)
            out_ch.append(c_prev)
        return stages, out_ch

    if spec.arch == "resnet18":
        if plan.units != _RESNET18_UNITS:
            raise ValueError(f"resnet18 needs units {_RESNET18_UNITS}")
        chans = [_scaled(c, spec.width_scale) for c in _RESNET18_STAGE_CHANNELS]
        stem = ConvUnit("stage1.stem", spec.in_channels, chans[0], rng, spec)
        stages, out_ch = [], []
        c_prev = chans[0]
        for i, c in enumerate(chans):
            layers = [stem] if i == 0 else []
            for j in range(2):
                stride = 2 if (i > 0 and j == 0) else 1
                layers.append(ResBlock(f"stage{i + 1}.b{j + 1}", c_prev, c, rng,
                                       spec, stride=stride))
                c_prev = c
            stages.append(layers)
            out_ch.append(c_prev)
        return stages, out_ch

    if spec.arch == "custom":
        c = _scaled(32, spec.width_scale)
        stages, out_ch = [], []
        c_prev = spec.in_channels
        for i in range(plan.n_stages):
            stages.append([ConvUnit(f"stage{i + 1}.u{i + 1}", c_prev, c, rng, spec)])
            c_prev = c
            out_ch.append(c)
        return stages, out_ch

    raise ValueError(f"unknown architecture id {spec.arch!r}")


# ---------------------------------------------------------------------------
# checkpoints

_MAGIC = b"SSNN"
_VERSION = 1
_DTYPE_TAGS = {"float32": "<f4", "float64": "<f8"}


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: SSNNModel, path):
    """Write magic, version, JSON manifest, then raw little-endian arrays.

    Tensor offsets are relative to the start of the data section (right
    after the manifest).
    """
    entries = [(name, p.data) for name, p in model.named_parameters()]
    for name, st in model.bn_states():
        if st.initialized:
            entries.append((f"{name}.running_mean", st.mean))
            entries.append((f"{name}.running_var", st.var))

    manifest = {"meta": _spec_meta(model.spec), "tensors": []}
    offset = 0
    for name, arr in entries:
        manifest["tensors"].append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": _DTYPE_TAGS[arr.dtype.name],
            "offset": offset,
            "nbytes": arr.nbytes,
        })
        offset += arr.nbytes
    manifest_bytes = json.dumps(manifest, sort_keys=True).encode()

    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<I", _VERSION))
    buf.write(struct.pack("<Q", len(manifest_bytes)))
    buf.write(manifest_bytes)
    for _, arr in entries:
        buf.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def _spec_meta(spec: NetworkSpec):
    return {
        "arch": spec.arch,
        "timesteps": list(spec.plan.timesteps),
        "units": list(spec.plan.units),
        "classes": spec.classes,
        "width_scale": spec.width_scale,
        "in_channels": spec.in_channels,
        "with_early_classifiers": spec.with_early_classifiers,
        "tau": spec.tau,
        "theta": spec.theta,
        "surrogate_a": spec.surrogate_a,
        "detach_reset": spec.detach_reset,
        "dtype": spec.dtype,
    }


def _spec_from_meta(meta) -> NetworkSpec:
    plan = StagePlan(tuple(meta["timesteps"]), tuple(meta["units"]))
    return NetworkSpec(
        arch=meta["arch"], plan=plan, classes=meta["classes"],
        width_scale=meta["width_scale"], in_channels=meta["in_channels"],
        with_early_classifiers=meta["with_early_classifiers"], tau=meta["tau"],
        theta=meta["theta"], surrogate_a=meta["surrogate_a"],
        detach_reset=meta["detach_reset"], dtype=meta["dtype"],
    )


def read_manifest(path):
    with open(path, "rb") as f:
        head = f.read(16)
        if len(head) < 16:
            raise CheckpointError("checkpoint truncated before header")
        if head[:4] != _MAGIC:
            raise CheckpointError(f"bad magic {head[:4]!r}, expected {_MAGIC!r}")
        (version,) = struct.unpack("<I", head[4:8])
        if version != _VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (mlen,) = struct.unpack("<Q", head[8:16])
        raw = f.read(mlen)
        if len(raw) < mlen:
            raise CheckpointError("checkpoint truncated inside manifest")
        try:
            manifest = json.loads(raw)
        except json.JSONDecodeError as e:
            raise CheckpointError(f"manifest is not valid JSON: {e}") from e
    return manifest


def load_checkpoint(path) -> SSNNModel:
    """Rebuild the model a checkpoint describes; bitwise round-trip safe."""
    manifest = read_manifest(path)
    model = build_network(_spec_from_meta(manifest["meta"]), seed=0)
    load_into(model, path, manifest=manifest)
    return model


def load_into(model: SSNNModel, path, manifest=None):
    if manifest is None:
        manifest = read_manifest(path)
    with open(path, "rb") as f:
        data = f.read()
    mlen = struct.unpack("<Q", data[8:16])[0]
    data_start = 16 + mlen
    by_name = {}
    for ent in manifest["tensors"]:
        lo = data_start + ent["offset"]
        hi = lo + ent["nbytes"]
        if hi > len(data):
            raise CheckpointError(f"tensor {ent['name']} extends past end of file")
        arr = np.frombuffer(data[lo:hi], dtype=np.dtype(ent["dtype"]))
        expect = int(np.prod(ent["shape"])) if ent["shape"] else 1
        if arr.size != expect:
            raise CheckpointError(f"tensor {ent['name']} size mismatch")
        by_name[ent["name"]] = arr.reshape(ent["shape"]).copy()

    for name, p in model.named_parameters():
        if name not in by_name:
            raise CheckpointError(f"checkpoint is missing parameter {name}")
        arr = by_name.pop(name)
        if arr.shape != p.data.shape:
            raise CheckpointError(
                f"parameter {name}: checkpoint shape {arr.shape} vs model {p.data.shape}"
            )
        p.data = arr
    for name, st in model.bn_states():
        mkey, vkey = f"{name}.running_mean", f"{name}.running_var"
        if mkey in by_name:
            if vkey not in by_name:
                raise CheckpointError(f"checkpoint has {mkey} without {vkey}")
            st.mean = by_name.pop(mkey)
            st.var = by_name.pop(vkey)
            st.initialized = True
    if by_name:
        raise CheckpointError(f"checkpoint has unexpected tensors: {sorted(by_name)}")
    return model
