"""Independent checkers: equivariance, kernel constraints, gradients.

Everything here recomputes claims from first principles rather than reusing
the layer internals under test: the convolution oracle is a nested loop, the
constraint checker permutes expanded kernels directly, and the gradient
checker uses central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, Tensor
from .groups import act_on_image, inverse
from .nets import EquivariantConv, QNetwork, Restrict, transform_feature

# Relative deviation floor keeps ratios finite on all-zero references.
_EPS = 1e-12


def rel_dev(got: np.ndarray, ref: np.ndarray) -> float:
    return float(np.abs(got - ref).max() / (np.abs(ref).max() + _EPS))


def brute_force_conv(x: np.ndarray, kernel: np.ndarray, stride: int = 1,
                     padding: int = 0, bias=None) -> np.ndarray:
    """Nested-loop cross-correlation of one [C,H,W] map, for use as an oracle.

    Deliberately naive; refuses instances above ~2e7 multiply-adds.
    """
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    if x.ndim != 3 or kernel.ndim != 4 or kernel.shape[1] != x.shape[0]:
        raise ValueError(f"bad oracle shapes {x.shape}, {kernel.shape}")
    c, h, w = x.shape
    o, _, kh, kw = kernel.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError("kernel larger than padded input")
    work = o * ho * wo * c * kh * kw
    if work > 2e7:
        raise ValueError(f"instance too large for the brute-force oracle ({work:.0f} madds)")
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding))).tolist()
    kl = kernel.tolist()
    out = np.zeros((o, ho, wo))
    for oi in range(o):
        ko = kl[oi]
        for y in range(ho):
            for z in range(wo):
                acc = 0.0
                for ci in range(c):
                    row = xp[ci]
                    kc = ko[ci]
                    for u in range(kh):
                        xr = row[y * stride + u]
                        ku = kc[u]
                        for v in range(kw):
                            acc += ku[v] * xr[z * stride + v]
                out[oi, y, z] = acc
    if bias is not None:
        out += np.asarray(bias, dtype=np.float64)[:, None, None]
    return out


@dataclass
class EquivarianceReport:
    name: str
    n_trials: int
    by_element: dict = field(default_factory=dict)

    @property
    def max_dev(self) -> float:
        return max(self.by_element.values()) if self.by_element else 0.0

    def ok(self, tol: float) -> bool:
        return self.max_dev < tol

    def __str__(self):
        worst = max(self.by_element, key=self.by_element.get) if self.by_element else "-"
        return f"{self.name}: max rel dev {self.max_dev:.3e} (worst at {worst}, {self.n_trials} trials)"


def _layer_elements(layer):
    if isinstance(layer, Restrict):
        return [(layer.map.embed(c), c) for c in layer.map.child.elements]
    return [(g, g) for g in layer.group.elements]


def check_layer_equivariance(layer, input_hw: int, n_trials: int = 100,
                             rng=None, elements=None, name: str = "layer") -> EquivarianceReport:
    """Compare layer(g.x) with g.layer(x) over random inputs, all group elements.

    Deviations are relative: max|difference| / (max|reference| + 1e-12).
    """
    rng = rng or np.random.default_rng(0)
    pairs = elements if elements is not None else _layer_elements(layer)
    dtype = layer.params()[0].data.dtype if layer.params() else np.float64
    report = EquivarianceReport(name, n_trials)
    for _ in range(n_trials):
        x = rng.standard_normal((layer.in_type.total_dim, input_hw, input_hw)).astype(dtype)
        ref = layer.forward(Tensor(x)).data
        for g_in, g_out in pairs:
            got = layer.forward(Tensor(transform_feature(layer.in_type, g_in, x))).data
            want = transform_feature(layer.out_type, g_out, ref)
            d = rel_dev(got, want)
            key = g_in.label
            report.by_element[key] = max(report.by_element.get(key, 0.0), d)
    return report


def check_network_equivariance(net: QNetwork, n_inputs: int = 20, rng=None) -> EquivarianceReport:
    """End-to-end: transforming the input must permute the feature vector."""
    if not net.symmetry or net.feature_type is None:
        raise ValueError("network does not declare a symmetry to check")
    rng = rng or np.random.default_rng(0)
    dtype = net.parameters()[0].data.dtype
    report = EquivarianceReport(net.manifest.get("builder", "network"), n_inputs)
    for _ in range(n_inputs):
        x = rng.standard_normal(net.in_shape).astype(dtype)
        ref = net.features(Tensor(x)).data
        for g_in, g_feat in net.symmetry:
            got = net.features(Tensor(act_on_image(g_in, x))).data
            want = transform_feature(net.feature_type, g_feat, ref)
            d = rel_dev(got, want)
            report.by_element[g_in.label] = max(report.by_element.get(g_in.label, 0.0), d)
    return report


def kernel_constraint_violation(layer: EquivariantConv, kernel=None, bias=None) -> float:
    """Max absolute violation of k(g x) = rho_out(g) k(x) rho_in(g)^-1.

    Checks the expanded kernel (and the expanded bias, which must be constant
    within each field).  Pass explicit arrays to test a mutated kernel.
    """
    wexp, bexp = layer.expanded()
    k = np.asarray(kernel if kernel is not None else wexp, dtype=np.float64)
    b = np.asarray(bias if bias is not None else bexp, dtype=np.float64)
    worst = 0.0
    for g in layer.group.elements:
        pout = layer.out_type.rho_perm(g)
        pin = layer.in_type.rho_perm(g)
        lhs = act_on_image(inverse(g), k)  # lhs[..,p] = k[.., g p]
        rhs = k[pout][:, pin]
        worst = max(worst, float(np.abs(lhs - rhs).max()))
        worst = max(worst, float(np.abs(b[pout] - b).max()))
    return worst


def network_constraint_violation(net: QNetwork) -> float:
    layers = [l for l in net.layers if isinstance(l, EquivariantConv)]
    if not layers:
        raise ValueError("network has no equivariant conv layers")
    return max(kernel_constraint_violation(l) for l in layers)


@dataclass
class GradientCheckReport:
    max_rel_err: float
    n_checked: int
    worst_param: str = ""
    n_skipped: int = 0

    def ok(self, tol: float = 1e-3) -> bool:
        return self.max_rel_err < tol

    def __str__(self):
        skipped = f", {self.n_skipped} kink-crossing skipped" if self.n_skipped else ""
        return (f"gradient check: max rel err {self.max_rel_err:.3e} over "
                f"{self.n_checked} coordinates (worst in {self.worst_param or '-'}{skipped})")


def gradient_check(loss_fn, params: list, n_coords: int = 50, h: float = 1e-5,
                   rng=None, skip_nondiff: bool = False) -> GradientCheckReport:
    """Central-difference check of d(loss)/d(param) on sampled coordinates.

    ``loss_fn`` must rebuild the forward pass from current parameter values.
    Parameters should be float64; flags a usage error otherwise since float32
    finite differences are meaningless at h=1e-5.

    With ``skip_nondiff`` the checker drops coordinates whose perturbation
    window straddles a kink (a relu sign change): there the difference
    quotient measures the kink, not the derivative.  Such coordinates are
    detected by the h and h/2 estimates disagreeing with each other, counted
    in ``n_skipped``, and excluded from the error; callers should bound the
    skipped fraction.
    """
    rng = rng or np.random.default_rng(0)
    for p in params:
        if p.data.dtype != np.float64:
            raise ValueError(f"gradient_check requires float64 parameters ({p.name} is {p.data.dtype})")
    with Tape() as tape:
        analytic = tape.gradients(loss_fn(), params)

    def central(flat, i, keep, p, step):
        flat[i] = keep + step
        p.version += 1  # layers cache on version; honor the contract
        up = float(loss_fn().data)
        flat[i] = keep - step
        p.version += 1
        dn = float(loss_fn().data)
        flat[i] = keep
        p.version += 1
        return (up - dn) / (2 * step)

    report = GradientCheckReport(0.0, 0)
    for p, g in zip(params, analytic):
        flat = p.data.ravel()
        coords = (
            np.arange(flat.size)
            if flat.size <= n_coords
            else rng.choice(flat.size, size=n_coords, replace=False)
        )
        for i in coords:
            keep = flat[i]
            num = central(flat, i, keep, p, h)
            a = float(g.ravel()[i])
            denom = max(abs(a), abs(num))
            if denom < 1e-7:
                err = 0.0  # both effectively zero
            else:
                err = abs(a - num) / denom
            if err > 1e-3 and skip_nondiff:
                # smooth coordinates agree across step sizes to O(h^2);
                # any visible disagreement means the window straddles a kink
                num2 = central(flat, i, keep, p, h / 2)
                agree = max(abs(num), abs(num2), 1e-7)
                if abs(num - num2) / agree > 1e-3:
                    report.n_skipped += 1
                    continue
            report.n_checked += 1
            if err > report.max_rel_err:
                report.max_rel_err = err
                report.worst_param = p.name
    return report
