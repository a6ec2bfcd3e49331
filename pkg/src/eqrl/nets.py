"""Q-networks built from group-structured convolution layers.

An equivariant layer stores one small base kernel per output field and
expands it over the group orbit at forward time, so the sliding-window
constraint  k(g x) = rho_out(g) k(x) rho_in(g)^-1  holds by construction.
Gradients flow to the base kernel through the expansion gather.

Feature channels are grouped into fields: a trivial field is one channel
(plain image planes), a regular field has one channel per group element and
permutes under the regular representation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .groups import (
    Group,
    GroupElement,
    Representation,
    RestrictionMap,
    act_on_grid,
    act_on_image,
    compose,
    inverse,
    restriction,
)


@dataclass(frozen=True)
class FieldType:
    """A stack of identical fields: ``multiplicity`` copies of one representation."""

    group: Group
    kind: str  # 'trivial' | 'regular'
    multiplicity: int

    def __post_init__(self):
        if self.kind not in ("trivial", "regular"):
            raise ValueError(f"unknown field kind {self.kind!r}")
        if self.multiplicity < 1:
            raise ValueError("multiplicity must be positive")

    @property
    def field_dim(self) -> int:
        return 1 if self.kind == "trivial" else self.group.order

    @property
    def total_dim(self) -> int:
        return self.multiplicity * self.field_dim

    def rho_perm(self, g: GroupElement) -> np.ndarray:
        """Gather indices for rho(g) on the full channel stack."""
        base = Representation(self.group, self.kind).perm(g)
        d = self.field_dim
        offsets = np.arange(self.multiplicity, dtype=np.int64)[:, None] * d
        return (offsets + base[None, :]).reshape(-1)


@dataclass
class FeatureField:
    """A spatial feature map [C,H,W] tagged with its field type."""

    ftype: FieldType
    tensor: Tensor

    def __post_init__(self):
        data = self.tensor.data
        if data.ndim != 3 or data.shape[0] != self.ftype.total_dim:
            raise ValueError(f"feature shape {data.shape} does not match type dim {self.ftype.total_dim}")


def transform_feature(ftype: FieldType, g: GroupElement, x: np.ndarray) -> np.ndarray:
    """Action of g on a feature map [..,C,H,W] or flat feature vector [..,C]."""
    perm = ftype.rho_perm(g)
    if x.ndim >= 3:
        return np.take(act_on_image(g, x), perm, axis=x.ndim - 3)
    return np.take(x, perm, axis=-1)


def _uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    s = float(np.sqrt(1.0 / fan_in))
    return rng.uniform(-s, s, size=shape).astype(dtype)


class EquivariantConv:
    """Group-equivariant convolution: trivial->regular (lifting) or regular->regular.

    Free parameters: one k*k patch per (out field, in channel-or-element)
    plus one bias scalar per out field, broadcast across the field's channels.
    """

    def __init__(self, in_type: FieldType, out_type: FieldType, kernel_size: int,
                 stride: int = 1, padding: int = 0, rng=None, dtype=np.float32, name: str = "econv"):
        if in_type.group != out_type.group:
            raise ValueError("input and output field types must share a group")
        if out_type.kind != "regular":
            raise ValueError("equivariant conv output must be regular fields")
        self.in_type, self.out_type = in_type, out_type
        self.k, self.stride, self.padding = kernel_size, stride, padding
        self.group = in_type.group
        self.lifting = in_type.kind == "trivial"
        rng = rng or np.random.default_rng(0)

        go = self.group.order
        fo, ic = out_type.multiplicity, in_type.total_dim
        base_in = in_type.multiplicity if self.lifting else ic
        fan_in = ic * kernel_size * kernel_size  # fan-in of the expanded kernel
        self.w = Parameter(_uniform_init(rng, (fo, base_in, kernel_size, kernel_size), fan_in, dtype), f"{name}.w")
        self.b = Parameter(np.zeros(fo, dtype=dtype), f"{name}.b")
        self._expand_idx = self._build_expand_indices()
        self._bias_idx = np.repeat(np.arange(fo, dtype=np.int64), go)
        self._cache_key = None
        self._cache = None

    def _build_expand_indices(self) -> np.ndarray:
        k, go = self.k, self.group.order
        fo = self.out_type.multiplicity
        ic = self.in_type.total_dim
        base_in = self.w.data.shape[1]
        # flat index helpers into the base kernel [fo, base_in, k, k]
        idx = np.empty((fo * go, ic, k, k), dtype=np.int64)
        f_axis = np.arange(fo, dtype=np.int64)[:, None, None, None]
        for gi, g in enumerate(self.group.elements):
            ginv = inverse(g)
            pos = np.empty((k, k), dtype=np.int64)
            for u in range(k):
                for v in range(k):
                    pu, pv = act_on_grid(ginv, (u, v), k)
                    pos[u, v] = pu * k + pv
            if self.lifting:
                src_ic = np.arange(ic, dtype=np.int64)
            else:
                # in channel (field fi, element h) reads base channel (fi, g^-1 h)
                shift = np.array(
                    [self.group.index(compose(ginv, h)) for h in self.group.elements], dtype=np.int64
                )
                src_ic = (np.arange(self.in_type.multiplicity, dtype=np.int64)[:, None] * go + shift[None, :]).reshape(-1)
            flat = (f_axis * base_in + src_ic[None, :, None, None]) * (k * k) + pos[None, None, :, :]
            idx[gi::go] = flat
        return idx

    def expanded(self) -> tuple[np.ndarray, np.ndarray]:
        """Expanded kernel and per-channel bias as plain arrays (cached)."""
        key = (self.w.version, self.b.version)
        if self._cache_key != key:
            wexp = self.w.data.ravel()[self._expand_idx.ravel()].reshape(self._expand_idx.shape)
            bexp = self.b.data[self._bias_idx]
            self._cache = (wexp, bexp)
            self._cache_key = key
        return self._cache

    def forward(self, x) -> Tensor:
        if ad.tape_active():
            w = ad.gather(self.w, self._expand_idx)
            b = ad.gather(self.b, self._bias_idx)
        else:
            wexp, bexp = self.expanded()
            w, b = Tensor(wexp), Tensor(bexp)
        return ad.bias_add(ad.conv2d(x, w, self.stride, self.padding), b)

    def params(self) -> list:
        return [self.w, self.b]

    def free_param_count(self) -> int:
        return self.w.size + self.b.size

    def out_hw(self, h: int) -> int:
        return (h + 2 * self.padding - self.k) // self.stride + 1

    def stride_exact(self, h: int) -> bool:
        return (h + 2 * self.padding - self.k) % self.stride == 0


class VanillaConv:
    """Plain convolution with per-channel bias."""

    def __init__(self, in_ch: int, out_ch: int, kernel_size: int, stride: int = 1,
                 padding: int = 0, rng=None, dtype=np.float32, name: str = "conv"):
        rng = rng or np.random.default_rng(0)
        self.k, self.stride, self.padding = kernel_size, stride, padding
        fan_in = in_ch * kernel_size * kernel_size
        self.w = Parameter(_uniform_init(rng, (out_ch, in_ch, kernel_size, kernel_size), fan_in, dtype), f"{name}.w")
        self.b = Parameter(np.zeros(out_ch, dtype=dtype), f"{name}.b")

    def forward(self, x) -> Tensor:
        return ad.bias_add(ad.conv2d(x, self.w.tensor, self.stride, self.padding), self.b.tensor)

    def params(self) -> list:
        return [self.w, self.b]

    def free_param_count(self) -> int:
        return self.w.size + self.b.size

    def out_hw(self, h: int) -> int:
        return (h + 2 * self.padding - self.k) // self.stride + 1

    def stride_exact(self, h: int) -> bool:
        return (h + 2 * self.padding - self.k) % self.stride == 0


class Restrict:
    """Regroup parent regular fields into subgroup regular fields (no parameters)."""

    def __init__(self, in_type: FieldType, child: Group, reflection_index: int = 0):
        if in_type.kind != "regular":
            raise ValueError("restriction applies to regular fields")
        self.in_type = in_type
        self.map: RestrictionMap = restriction(in_type.group, child, reflection_index)
        self.out_type = FieldType(child, "regular", in_type.multiplicity * self.map.n_blocks)
        go = in_type.group.order
        offsets = np.arange(in_type.multiplicity, dtype=np.int64)[:, None] * go
        self.perm = (offsets + self.map.channel_permutation[None, :]).reshape(-1)

    def forward(self, x) -> Tensor:
        return ad.channel_permute(x, self.perm)

    def params(self) -> list:
        return []

    def free_param_count(self) -> int:
        return 0


class ReLU:
    def forward(self, x) -> Tensor:
        return ad.relu(x)

    def params(self) -> list:
        return []

    def free_param_count(self) -> int:
        return 0


class Flatten:
    def forward(self, x) -> Tensor:
        d = x.data
        if d.ndim == 4:
            return ad.reshape(x, (d.shape[0], -1))
        return ad.reshape(x, (-1,))

    def params(self) -> list:
        return []

    def free_param_count(self) -> int:
        return 0


class Dense:
    def __init__(self, in_dim: int, out_dim: int, rng=None, dtype=np.float32, name: str = "fc"):
        rng = rng or np.random.default_rng(0)
        self.w = Parameter(_uniform_init(rng, (out_dim, in_dim), in_dim, dtype), f"{name}.w")
        self.b = Parameter(np.zeros(out_dim, dtype=dtype), f"{name}.b")

    def forward(self, x) -> Tensor:
        return ad.linear(x, self.w.tensor, self.b.tensor)

    def params(self) -> list:
        return [self.w, self.b]

    def free_param_count(self) -> int:
        return self.w.size + self.b.size


class LinearHead:
    def __init__(self, in_dim: int, n_actions: int, rng=None, dtype=np.float32):
        self.fc = Dense(in_dim, n_actions, rng, dtype, name="head")
        self.in_dim, self.n_actions, self.dtype = in_dim, n_actions, dtype

    def forward(self, feats) -> Tensor:
        return self.fc.forward(feats)

    def params(self) -> list:
        return self.fc.params()

    def reinit(self, rng):
        self.fc = Dense(self.in_dim, self.n_actions, rng, self.dtype, name="head")

    def free_param_count(self) -> int:
        return self.fc.free_param_count()


class DuelingHead:
    """State-value and advantage streams combined as v + a - mean(a)."""

    def __init__(self, in_dim: int, n_actions: int, rng=None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        self.value = Dense(in_dim, 1, rng, dtype, name="head.value")
        self.adv = Dense(in_dim, n_actions, rng, dtype, name="head.adv")
        self.in_dim, self.n_actions, self.dtype = in_dim, n_actions, dtype

    def forward(self, feats) -> Tensor:
        single = feats.data.ndim == 1
        if single:
            feats = ad.reshape(feats, (1, -1))
        q = ad.dueling_combine(self.value.forward(feats), self.adv.forward(feats))
        return ad.reshape(q, (-1,)) if single else q

    def params(self) -> list:
        return self.value.params() + self.adv.params()

    def reinit(self, rng):
        self.value = Dense(self.in_dim, 1, rng, self.dtype, name="head.value")
        self.adv = Dense(self.in_dim, self.n_actions, rng, self.dtype, name="head.adv")

    def free_param_count(self) -> int:
        return self.value.free_param_count() + self.adv.free_param_count()


class QNetwork:
    """Feature extractor (conv stack plus flatten) and a Q-value head.

    ``symmetry`` lists (input element, feature element) pairs: transforming
    the input image by the first must permute the flat feature vector by the
    second's regular action.  Empty for vanilla networks.
    """

    def __init__(self, layers: list, head, in_shape, n_actions: int, manifest: dict,
                 feature_type: FieldType | None = None, symmetry=(), stride_exact: bool = False):
        self.layers = layers
        self.head = head
        self.in_shape = tuple(in_shape)
        self.n_actions = n_actions
        self.manifest = dict(manifest)
        self.feature_type = feature_type
        self.symmetry = tuple(symmetry)
        self.stride_exact = stride_exact

    def features(self, x) -> Tensor:
        t = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
        for layer in self.layers:
            t = layer.forward(t)
        return t

    def q_values(self, x) -> Tensor:
        return self.head.forward(self.features(x))

    def q_values_np(self, obs: np.ndarray) -> np.ndarray:
        """Q row for one observation, never recorded on a tape."""
        if ad.tape_active():
            raise RuntimeError("q_values_np is an inference helper; use q_values under a tape")
        return self.q_values(Tensor(obs)).data

    def parameters(self) -> list:
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        if self.head is not None:
            out.extend(self.head.params())
        return out

    def extractor_parameters(self) -> list:
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def head_parameters(self) -> list:
        return list(self.head.params()) if self.head is not None else []

    def param_count(self) -> int:
        n = sum(layer.free_param_count() for layer in self.layers)
        if self.head is not None:
            n += self.head.free_param_count()
        return n

    def reinit_head(self, rng):
        self.head.reinit(rng)

    def state_arrays(self) -> dict:
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_state(self, arrays: dict):
        params = self.parameters()
        names = {p.name for p in params}
        missing = names.symmetric_difference(arrays.keys())
        if missing:
            raise ValueError(f"checkpoint/network parameter mismatch: {sorted(missing)}")
        for p in params:
            p.assign(np.asarray(arrays[p.name]))

    def copy(self) -> "QNetwork":
        twin = build_network(self.manifest)
        twin.load_state(self.state_arrays())
        return twin


def _conv_stack_geometry(layers, d: int):
    """Propagate spatial size; returns (final size, every stride step exact)."""
    size, exact = d, True
    for layer in layers:
        if hasattr(layer, "out_hw"):
            exact = exact and layer.stride_exact(size)
            size = layer.out_hw(size)
            if size < 1:
                raise ValueError(f"input size {d} too small for this stack (hit {size})")
    return size, exact


def build_snake_vanilla(m: int = 3, d: int = 16, n_actions: int = 4, head: str = "linear",
                        rng=None, dtype=np.float32) -> QNetwork:
    rng = rng or np.random.default_rng(0)
    convs = [
        VanillaConv(m, 32, 7, 2, 2, rng, dtype, "l0"), ReLU(),
        VanillaConv(32, 64, 5, 2, 1, rng, dtype, "l1"), ReLU(),
        VanillaConv(64, 64, 5, 1, 1, rng, dtype, "l2"), ReLU(),
    ]
    d3, exact = _conv_stack_geometry(convs, d)
    layers = convs + [Flatten(), Dense(64 * d3 * d3, 256, rng, dtype, "l3"), ReLU()]
    hd = _make_head(head, 256, n_actions, rng, dtype)
    manifest = {"builder": "snake_vanilla", "m": m, "d": d, "n_actions": n_actions, "head": head}
    return QNetwork(layers, hd, (m, d, d), n_actions, manifest, stride_exact=exact)


def build_snake_equivariant(m: int = 3, d: int = 16, n_actions: int = 4, head: str = "linear",
                            rng=None, dtype=np.float32) -> QNetwork:
    rng = rng or np.random.default_rng(0)
    g = Group.dihedral(4)
    t_in = FieldType(g, "trivial", m)
    t1, t2, t3 = (FieldType(g, "regular", f) for f in (8, 12, 12))
    t_out = FieldType(g, "regular", 32)
    convs = [
        EquivariantConv(t_in, t1, 7, 2, 2, rng, dtype, "l0"), ReLU(),
        EquivariantConv(t1, t2, 5, 2, 1, rng, dtype, "l1"), ReLU(),
        EquivariantConv(t2, t3, 5, 1, 1, rng, dtype, "l2"), ReLU(),
    ]
    d3, exact = _conv_stack_geometry(convs, d)
    convs += [EquivariantConv(t3, t_out, d3, 1, 0, rng, dtype, "l3"), ReLU()]
    layers = convs + [Flatten()]
    hd = _make_head(head, t_out.total_dim, n_actions, rng, dtype)
    manifest = {"builder": "snake_equivariant", "m": m, "d": d, "n_actions": n_actions, "head": head}
    sym = tuple((el, el) for el in g.elements)
    return QNetwork(layers, hd, (m, d, d), n_actions, manifest,
                    feature_type=t_out, symmetry=sym, stride_exact=exact)


def build_pacman_vanilla(m: int = 4, d: int = 19, n_actions: int = 4, head: str = "linear",
                         rng=None, dtype=np.float32) -> QNetwork:
    rng = rng or np.random.default_rng(0)
    convs = [
        VanillaConv(m, 32, 7, 4, 2, rng, dtype, "l0"), ReLU(),
        VanillaConv(32, 64, 5, 2, 2, rng, dtype, "l1"), ReLU(),
        VanillaConv(64, 64, 5, 2, 1, rng, dtype, "l2"), ReLU(),
    ]
    d3, exact = _conv_stack_geometry(convs, d)
    layers = convs + [Flatten(), Dense(64 * d3 * d3, 512, rng, dtype, "l3"), ReLU()]
    hd = _make_head(head, 512, n_actions, rng, dtype)
    manifest = {"builder": "pacman_vanilla", "m": m, "d": d, "n_actions": n_actions, "head": head}
    return QNetwork(layers, hd, (m, d, d), n_actions, manifest, stride_exact=exact)


def build_pacman_equivariant(m: int = 4, d: int = 19, n_actions: int = 4, head: str = "linear",
                             restrict: bool = True, reflection_index: int = 0,
                             rng=None, dtype=np.float32) -> QNetwork:
    rng = rng or np.random.default_rng(0)
    g4 = Group.dihedral(4)
    t_in = FieldType(g4, "trivial", m)
    t1 = FieldType(g4, "regular", 8)
    t2 = FieldType(g4, "regular", 16)
    convs = [
        EquivariantConv(t_in, t1, 7, 2, 2, rng, dtype, "l0"), ReLU(),
        EquivariantConv(t1, t2, 5, 2, 1, rng, dtype, "l1"), ReLU(),
    ]
    if restrict:
        g1 = Group.dihedral(1)
        res = Restrict(t2, g1, reflection_index)
        t2b = res.out_type  # 64 reflection-group fields
        t3 = FieldType(g1, "regular", 64)
        t_out = FieldType(g1, "regular", 384)
        convs.append(res)
        sym = tuple((res.map.embed(c), c) for c in g1.elements)
    else:
        t2b = t2
        t3 = FieldType(g4, "regular", 16)
        t_out = FieldType(g4, "regular", 96)
        sym = tuple((el, el) for el in g4.elements)
    convs += [EquivariantConv(t2b, t3, 5, 1, 1, rng, dtype, "l2"), ReLU()]
    d3, exact = _conv_stack_geometry(convs, d)
    convs += [EquivariantConv(t3, t_out, d3, 1, 0, rng, dtype, "l3"), ReLU()]
    layers = convs + [Flatten()]
    hd = _make_head(head, t_out.total_dim, n_actions, rng, dtype)
    manifest = {"builder": "pacman_equivariant", "m": m, "d": d, "n_actions": n_actions,
                "head": head, "restrict": restrict, "reflection_index": reflection_index}
    return QNetwork(layers, hd, (m, d, d), n_actions, manifest,
                    feature_type=t_out, symmetry=sym, stride_exact=exact)


def _make_head(kind: str, in_dim: int, n_actions: int, rng, dtype):
    if kind == "linear":
        return LinearHead(in_dim, n_actions, rng, dtype)
    if kind == "dueling":
        return DuelingHead(in_dim, n_actions, rng, dtype)
    raise ValueError(f"unknown head kind {kind!r}")


BUILDERS = {
    "snake_vanilla": build_snake_vanilla,
    "snake_equivariant": build_snake_equivariant,
    "pacman_vanilla": build_pacman_vanilla,
    "pacman_equivariant": build_pacman_equivariant,
}


def build_network(manifest: dict, rng=None) -> QNetwork:
    spec = dict(manifest)
    name = spec.pop("builder", None)
    if name not in BUILDERS:
        raise ValueError(f"unknown network builder {name!r}")
    return BUILDERS[name](rng=rng, **spec)


def equivariant_forward(layer, field: FeatureField) -> FeatureField:
    """Apply an equivariant layer to a single tagged feature map."""
    if field.ftype != layer.in_type:
        raise ValueError(f"field type {field.ftype} does not match layer input {layer.in_type}")
    out = layer.forward(field.tensor)
    return FeatureField(layer.out_type, out)


def save_network(path, net: QNetwork, extra: dict | None = None):
    manifest = dict(net.manifest)
    manifest["param_count"] = net.param_count()
    if extra:
        manifest["extra"] = extra
    from .checkpoint import save_arrays

    save_arrays(path, manifest, net.state_arrays())


def load_network(path) -> QNetwork:
    from .checkpoint import load_arrays

    manifest, arrays = load_arrays(path)
    spec = {k: v for k, v in manifest.items() if k not in ("param_count", "extra")}
    net = build_network(spec)
    net.load_state(arrays)
    net.manifest = spec
    return net
