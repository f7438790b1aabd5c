"""Executable gradient verification, from primitives to the full model.

Three blocks of checks, each comparing taped gradients against central
differences: differentiable primitives and the two attention mechanisms at
1e-6, then every parameter of a small randomly initialized model through
the identity loss on a synthetic two-person scene at 1e-4.  The looser
full-model tolerance absorbs the longer chain of float64 cancellations; a
genuinely wrong partial derivative produces errors orders of magnitude
above it.

``run_gradcheck(corrupt=True)`` deliberately biases one analytic gradient
entry before comparison, proving the harness can fail.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .attention import (
    DeformAttnParams,
    MultiHeadAttnParams,
    ReferencePoint,
    deform_attn,
    multi_head_self_attention,
    residual_layernorm,
)
from .data import IdentityBank, Person, render_scene
from .detector import Box
from .errors import GradcheckFailure
from .losses import OIMState, focal_oim_loss
from .tensor import GradTape, Tensor, max_rel_error
from .transformer import ReIDConfig, ReIDTransformer

__all__ = ["CheckResult", "run_gradcheck", "format_results"]

PRIMITIVE_TOL = 1e-6
ATTENTION_TOL = 1e-6
FULL_MODEL_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def _check(name, f, x, tol, h=1e-6) -> CheckResult:
    return CheckResult(name, tt.central_diff_gradcheck(f, x, h=h), tol)


def check_primitives() -> list[CheckResult]:
    rng = np.random.default_rng(100)
    a = Tensor(rng.standard_normal((3, 4)))
    b = Tensor(rng.standard_normal((4, 5)))
    col = Tensor(rng.standard_normal((3, 1)))
    pos = Tensor(rng.uniform(0.5, 2.0, (3, 4)))
    gamma = Tensor(rng.standard_normal(4))
    beta = Tensor(rng.standard_normal(4))
    fmap = Tensor(rng.standard_normal((3, 5, 6)))
    point = Tensor(np.array([2.3, 1.7]))
    checks = [
        ("matmul", lambda x: tt.sum_all(tt.matmul(x, b)), a),
        ("add", lambda x: tt.sum_all(tt.add(x, a)), Tensor(rng.standard_normal((3, 4)))),
        ("mul", lambda x: tt.sum_all(tt.mul(x, a)), Tensor(rng.standard_normal((3, 4)))),
        ("mul_column", lambda x: tt.sum_all(tt.mul(a, x)), col),
        ("scale_add_scalar", lambda x: tt.add_scalar(tt.scale(tt.sum_all(x), 0.7), 1.3), a),
        ("powc", lambda x: tt.sum_all(tt.powc(x, 2.5)), pos),
        ("log", lambda x: tt.sum_all(tt.log(x)), pos),
        ("mean_all", tt.mean_all, a),
        ("sum_row_groups", lambda x: tt.sum_all(tt.sum_row_groups(x, 2)), Tensor(rng.standard_normal((6, 3)))),
        ("softmax_rows", lambda x: tt.sum_all(tt.mul(tt.softmax_rows(x), a)), Tensor(rng.standard_normal((3, 4)))),
        ("layer_norm_x", lambda x: tt.sum_all(tt.mul(tt.layer_norm(x, gamma, beta), a)), Tensor(rng.standard_normal((3, 4)))),
        ("layer_norm_gamma", lambda g: tt.sum_all(tt.mul(tt.layer_norm(a, g, beta), a)), gamma),
        ("l2_normalize_rows", lambda x: tt.sum_all(tt.mul(tt.l2_normalize_rows(x), a)), Tensor(rng.standard_normal((3, 4)))),
        ("concat_slice", lambda x: tt.sum_all(tt.slice_cols(tt.concat_cols((x, a)), 2, 6)), Tensor(rng.standard_normal((3, 4)))),
        ("take_gather", lambda x: tt.sum_all(tt.gather_pairs(tt.softmax_rows(tt.take_rows(x, [0, 2])), [0, 1], [1, 3])), Tensor(rng.standard_normal((3, 4)))),
        ("bilinear_map", lambda m: tt.sum_all(tt.bilinear_sample(m, point)), fmap),
        ("bilinear_point", lambda p: tt.sum_all(tt.bilinear_sample(fmap, p)), point),
        ("bilinear_rows", lambda p: tt.sum_all(tt.bilinear_sample_rows(fmap, p)), Tensor(rng.uniform(0.5, 4.0, (4, 2)))),
    ]
    return [_check(f"primitive.{n}", f, x, PRIMITIVE_TOL) for n, f, x in checks]


def _mha_params(rng, d=6, heads=2):
    dk = d // heads
    g = lambda *s: Tensor(rng.standard_normal(s) / np.sqrt(s[0]))
    return MultiHeadAttnParams(
        wq=tuple(g(d, dk) for _ in range(heads)),
        wk=tuple(g(d, dk) for _ in range(heads)),
        wv=tuple(g(d, dk) for _ in range(heads)),
        wo=g(heads * dk, d),
    )


def _deform_params(rng, d=6, c=4, heads=2, points=2):
    g = lambda *s: Tensor(rng.standard_normal(s) / np.sqrt(s[0]))
    return DeformAttnParams(
        w_offset=g(d, 2 * heads * points),
        b_offset=Tensor(rng.standard_normal(2 * heads * points)),
        w_weight=g(d, heads * points),
        b_weight=Tensor(rng.standard_normal(heads * points)),
        w_value=tuple(g(c, d // heads) for _ in range(heads)),
        w_out=tuple(g(d // heads, d) for _ in range(heads)),
        num_points=points,
    )


def check_attention() -> list[CheckResult]:
    rng = np.random.default_rng(200)
    d = 6
    y = Tensor(rng.standard_normal((4, d)))
    mha = _mha_params(rng, d)
    weigh = Tensor(rng.standard_normal((4, d)))
    results = [
        _check(
            "attention.mha_input",
            lambda x: tt.sum_all(tt.mul(multi_head_self_attention(x, mha), weigh)),
            y,
            ATTENTION_TOL,
        )
    ]
    for attr in ("wq", "wk", "wv", "wo"):

        def f(x, attr=attr):
            kw = {
                k: (getattr(mha, k) if k != attr else ((x,) + getattr(mha, k)[1:] if k != "wo" else x))
                for k in ("wq", "wk", "wv", "wo")
            }
            out = multi_head_self_attention(y, MultiHeadAttnParams(**kw))
            return tt.sum_all(tt.mul(out, weigh))

        base = getattr(mha, attr) if attr == "wo" else getattr(mha, attr)[0]
        results.append(_check(f"attention.mha_{attr}", f, base, ATTENTION_TOL))

    gamma = Tensor(rng.standard_normal(d))
    beta = Tensor(rng.standard_normal(d))
    results.append(
        _check(
            "attention.residual_layernorm",
            lambda x: tt.sum_all(
                tt.mul(residual_layernorm(x, multi_head_self_attention(x, mha), gamma, beta), weigh)
            ),
            y,
            ATTENTION_TOL,
        )
    )

    c = 4
    fmap = Tensor(rng.standard_normal((c, 6, 7)))
    refs = [ReferencePoint(0.3, 0.4), ReferencePoint(0.7, 0.2), ReferencePoint(0.5, 0.9)]
    dp = _deform_params(rng, d, c)
    z = Tensor(rng.standard_normal((3, d)))
    wz = Tensor(rng.standard_normal((3, d)))

    def deform_with(field, x):
        kw = {
            "w_offset": dp.w_offset,
            "b_offset": dp.b_offset,
            "w_weight": dp.w_weight,
            "b_weight": dp.b_weight,
            "w_value": dp.w_value,
            "w_out": dp.w_out,
            "num_points": dp.num_points,
        }
        if field in ("w_value", "w_out"):
            kw[field] = (x,) + kw[field][1:]
        elif field != "z":
            kw[field] = x
        params = DeformAttnParams(**kw)
        zz = x if field == "z" else z
        return tt.sum_all(tt.mul(deform_attn(zz, refs, fmap, params), wz))

    for field, base in (
        ("z", z),
        ("w_offset", dp.w_offset),
        ("b_offset", dp.b_offset),
        ("w_weight", dp.w_weight),
        ("b_weight", dp.b_weight),
        ("w_value", dp.w_value[0]),
        ("w_out", dp.w_out[0]),
    ):
        results.append(
            _check(
                f"attention.deform_{field}",
                lambda x, field=field: deform_with(field, x),
                base,
                ATTENTION_TOL,
            )
        )

    def deform_fmap(m):
        return tt.sum_all(tt.mul(deform_attn(z, refs, m, dp), wz))

    # Linear in the map, so a wider step costs no truncation error and
    # drowns less in float roundoff on the tiny corner weights.
    results.append(
        _check("attention.deform_fmap", deform_fmap, fmap, ATTENTION_TOL, h=1e-4)
    )
    return results


def _gradcheck_scene(dim: int, image_size: int):
    """Two labeled persons on a small pyramid, via the benchmark renderer."""
    bank = IdentityBank.create(num_labeled=2, num_unlabeled=0, dim=dim, seed=7)
    persons = (
        Person(Box(0.15, 0.2, 0.45, 0.6), label=0, bank_index=0),
        Person(Box(0.55, 0.35, 0.85, 0.8), label=1, bank_index=1),
    )
    rng = np.random.default_rng(8)
    pyramid = render_scene(bank, persons, image_size, sigma_bg=0.05, rng=rng)
    refs = [p.box.center for p in persons] + [(0.5, 0.1)]
    refs = [ReferencePoint(x, y) for x, y in refs]
    labels = [0, 1, -2]
    return pyramid, refs, labels


def check_full_model(corrupt: bool = False) -> list[CheckResult]:
    """Every model parameter against central differences, one at a time.

    Random init style so no gradient path hides behind a zero projection.
    """
    cfg = ReIDConfig(
        dim=8,
        heads=2,
        points=2,
        m_layers=2,
        k_cross=2,
        num_queries=3,
        scheme="shared",
        skip_first_self_attention=False,
    )
    model = ReIDTransformer.init(cfg, seed=11, style="random")
    pyramid, refs, labels = _gradcheck_scene(cfg.dim, image_size=64)
    srng = np.random.default_rng(12)
    lut = srng.standard_normal((2, cfg.query_width))
    lut /= np.linalg.norm(lut, axis=1, keepdims=True)
    states = []
    for _ in range(cfg.output_scales):
        st = OIMState.initial(2, cfg.query_width, queue_capacity=4)
        st.lut[:] = lut
        states.append(st)

    def loss() -> Tensor:
        emb = model.forward(pyramid, refs)
        total = None
        for scale, st in zip(emb.per_scale, states):
            l, _ = focal_oim_loss(tt.l2_normalize_rows(scale), labels, st, gamma=2.0)
            total = l if total is None else tt.add(total, l)
        return tt.scale(total, 1.0 / len(states))

    names = sorted(model.params)
    with GradTape() as tape:
        out = loss()
        analytic = tape.gradients(out, [model.params[n] for n in names])
    if corrupt:
        analytic[0] = analytic[0] + 1e-3

    results = []
    h = 1e-6
    for name, grad in zip(names, analytic):
        base = model.params[name].data
        numeric = np.zeros_like(base).reshape(-1)
        flat = base.reshape(-1)
        for i in range(flat.size):
            for sign, slot in ((+1, 0), (-1, 1)):
                probe = flat.copy()
                probe[i] += sign * h
                model.params[name] = Tensor(probe.reshape(base.shape))
                if slot == 0:
                    f_hi = loss().item()
                else:
                    f_lo = loss().item()
            numeric[i] = (f_hi - f_lo) / (2.0 * h)
        model.params[name] = Tensor(base)
        results.append(
            CheckResult(
                f"full_model.{name}",
                max_rel_error(grad, numeric.reshape(base.shape)),
                FULL_MODEL_TOL,
            )
        )
    return results


def run_gradcheck(corrupt: bool = False) -> list[CheckResult]:
    results = check_primitives()
    results += check_attention()
    results += check_full_model(corrupt=corrupt)
    return results


def format_results(results: list[CheckResult]) -> str:
    lines = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(
            f"{status} {r.name} max_rel={r.max_rel_error:.3e} tol={r.tolerance:.0e}"
        )
    return "\n".join(lines)


def raise_on_failure(results: list[CheckResult]) -> None:
    failed = [r for r in results if not r.passed]
    if failed:
        worst = max(failed, key=lambda r: r.max_rel_error)
        raise GradcheckFailure(
            f"{len(failed)} gradient check(s) failed; worst {worst.name} "
            f"max_rel={worst.max_rel_error:.3e} tol={worst.tolerance:.0e}"
        )
