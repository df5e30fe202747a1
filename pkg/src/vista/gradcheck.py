"""Finite-difference checks of the hand-written backward passes."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import SourceTargetSplit, qla_backward, qla_forward
from .numerics import ActivationKind, finite_diff_grad, relative_error

BLOCKS = ("qs", "qt", "ks", "kt", "vs", "vt")
KERNEL_SHAPES = ((16, 2, 4), (32, 4, 8), (64, 8, 16))


@dataclass
class CheckResult:
    suite: str
    label: str
    errors: dict = field(default_factory=dict)
    tolerance: float = 1e-6

    @property
    def worst(self):
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def worst_tensor(self):
        return max(self.errors, key=self.errors.get) if self.errors else None

    @property
    def passed(self):
        return self.worst < self.tolerance


def random_split(rng, n, m, d, scale=0.7):
    blocks = {name: rng.normal(scale=scale, size=(n if name.endswith("s") else m, d)) for name in BLOCKS}
    return SourceTargetSplit(**blocks)


def qla_grad_errors(split, phi1, phi2=ActivationKind.IDENTITY, rng=None, h=1e-5, corrupt=None):
    """Relative error of each analytic QLA gradient against central differences.

    The loss is a random linear functional ``sum(R_s * o_s) + sum(R_t * o_t)``
    so the output gradients are just ``R_s`` and ``R_t``. `corrupt` names a
    block whose analytic gradient is perturbed (harness self-test).
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    r_s = rng.normal(size=(split.n, split.d))
    r_t = rng.normal(size=(split.m, split.d))
    _, _, saved = qla_forward(split, phi1, phi2)
    grads = qla_backward(saved, split, r_s, r_t).as_dict()
    if corrupt is not None:
        key = "d_" + corrupt
        grads[key] = grads[key] + 1e-3 * (1.0 + np.abs(grads[key]))

    base = {name: getattr(split, name) for name in BLOCKS}
    errors = {}
    for name in BLOCKS:
        if base[name].size == 0:
            errors[name] = 0.0
            continue

        def loss(x, name=name):
            o_s, o_t, _ = qla_forward(SourceTargetSplit(**{**base, name: x}), phi1, phi2)
            return float(np.sum(r_s * o_s) + np.sum(r_t * o_t))

        errors[name] = relative_error(grads["d_" + name], finite_diff_grad(loss, base[name], h))
    return errors


def kernel_suite(seeds=20, shapes=KERNEL_SHAPES, kinds=tuple(ActivationKind), tolerance=1e-6,
                 corrupt=None, phi2=ActivationKind.IDENTITY):
    results = []
    for kind in kinds:
        kind = ActivationKind(kind)
        for n, m, d in shapes:
            for seed in range(seeds):
                rng = np.random.default_rng([seed, n, m, d])
                split = random_split(rng, n, m, d)
                errs = qla_grad_errors(split, kind, phi2, rng=rng, corrupt=corrupt)
                label = f"qla[{kind.value}/{ActivationKind(phi2).value}] n={n} m={m} d={d} seed={seed}"
                results.append(CheckResult("kernel", label, errs, tolerance))
    return results


MODEL_VARIANTS = (
    {},
    {"phi1": "silu"},
    {"phi1": "identity"},
    {"causal_summary": True},
    {"recon_reduction": "sum", "include_self": False},
    {"arch": "softmax"},
)


def tiny_model(seed, **overrides):
    """d=4, k=2, one layer per stage, unit-scale init so the FD oracle is well conditioned.

    The stop-gradient on reconstruction targets is disabled because finite
    differences cannot see it.
    """
    from .model import ModelConfig, VistaModel

    settings = dict(d=4, k=2, head_hidden=(5,), item_buckets=32, n_categories=4,
                    recon_stop_grad=False, emb_init=1.0)
    settings.update(overrides)
    return VistaModel.create(ModelConfig(**settings), seed=seed)


def tiny_batch(rng, history=6, candidates=2, n_categories=4):
    from .data import SequenceBatch

    labels = np.zeros(candidates)
    labels[0] = 1.0
    return SequenceBatch("probe", rng.integers(0, 1000, history), rng.integers(0, n_categories, history),
                         rng.integers(0, 1000, candidates), rng.integers(0, n_categories, candidates),
                         rng.permutation(labels))


def model_grad_errors(model, batches, h=1e-5, corrupt=None):
    """Per-parameter relative error of `loss_and_grads` against central differences."""
    _, grads = model.loss_and_grads(batches)
    if corrupt is not None:
        grads[corrupt] = grads[corrupt] + 1e-3 * (1.0 + np.abs(grads[corrupt]))
    errors = {}
    for name, param in model.params.items():
        flat = param.reshape(-1)
        numeric = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            plus = model.loss_and_grads(batches)[0].total
            flat[i] = orig - h
            minus = model.loss_and_grads(batches)[0].total
            flat[i] = orig
            numeric[i] = (plus - minus) / (2 * h)
        analytic = grads[name].reshape(-1)
        errors[name] = 0.0 if not (numeric.any() or analytic.any()) else relative_error(analytic, numeric)
    return errors


def model_suite(seeds=5, variants=MODEL_VARIANTS, tolerance=1e-5, corrupt=None):
    results = []
    for variant in variants:
        for seed in range(seeds):
            rng = np.random.default_rng([seed, 7])
            model = tiny_model(seed, **variant)
            batch = tiny_batch(rng)
            bad = corrupt if corrupt in model.params else None
            errs = model_grad_errors(model, [batch], corrupt=bad)
            tag = ",".join(f"{k}={v}" for k, v in variant.items()) or "default"
            results.append(CheckResult("model", f"model[{tag}] seed={seed}", errs, tolerance))
    return results
