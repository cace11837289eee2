"""Central finite-difference gradient checks for every differentiable op and the tiny model."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import tensor as tn
from .config import ModelConfig
from .graph import AdaptiveGraphBank, FastProjection, dense_graph_apply, fast_aggregate, fast_project
from .layer import LayerParams, StsgKernelParams, build_kernel, layer_forward, static_kernel_part, stsg_convolve
from .model import FasterSTS, forward, mae_loss
from .tensor import Tape, Tensor, backward, no_grad

STEP = 1e-5
OP_TOL = 1e-4
MODEL_TOL = 1e-3
# entries smaller than this fraction of a parameter's largest gradient are
# measured against that level; central differences cannot resolve them further
REL_FLOOR = 1e-3
ABS_FLOOR = 1e-12


def numeric_grad(fn: Callable[[], Tensor], param: Tensor, step: float = STEP,
                 entries: Optional[np.ndarray] = None) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. ``param`` at the flat ``entries`` (all by default)."""
    flat = param.data.reshape(-1)
    idx = np.arange(flat.size) if entries is None else entries
    out = np.zeros(len(idx))
    with no_grad():
        for n, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + step
            fp = fn().item()
            flat[i] = orig - step
            fm = fn().item()
            flat[i] = orig
            out[n] = (fp - fm) / (2 * step)
    return out


def analytic_grads(fn: Callable[[], Tensor], params: list[Tensor]) -> list[np.ndarray]:
    for p in params:
        p.grad = None
    with Tape():
        loss = fn()
        backward(loss)
    return [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic).reshape(-1)
    n = np.asarray(numeric).reshape(-1)
    if a.size == 0:
        return 0.0
    floor = max(REL_FLOOR * max(np.abs(a).max(), np.abs(n).max()), ABS_FLOOR)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def check(fn: Callable[[], Tensor], params: dict[str, Tensor], max_entries: Optional[int] = None,
          seed: int = 0) -> dict[str, float]:
    """Max relative error per parameter. ``max_entries`` samples large parameters."""
    names = list(params)
    grads = analytic_grads(fn, [params[n] for n in names])
    rng = np.random.default_rng(seed)
    errs = {}
    for name, g in zip(names, grads):
        p = params[name]
        entries = None
        if max_entries is not None and p.size > max_entries:
            # always include the largest analytic entries, plus a random sample
            top = np.argsort(-np.abs(g.reshape(-1)))[: max_entries // 2]
            rand = rng.choice(p.size, max_entries - len(top), replace=False)
            entries = np.unique(np.concatenate([top, rand]))
        num = numeric_grad(fn, p, entries=entries)
        ana = g.reshape(-1) if entries is None else g.reshape(-1)[entries]
        errs[name] = rel_error(ana, num)
    return errs


def projected(out_fn: Callable[[], Tensor], shape, rng) -> Callable[[], Tensor]:
    """Scalar loss sum(out * R) for a fixed random R."""
    R = Tensor(rng.standard_normal(shape))
    return lambda: tn.sum_all(tn.hadamard(out_fn(), R))


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.error < self.tol


def _u(rng, *shape) -> Tensor:
    return Tensor(rng.uniform(-2.0, 2.0, shape), requires_grad=True)


def tiny_config(**overrides) -> ModelConfig:
    base = dict(N=4, H=4, d_e=2, d=2, L=2, num_layers=1, skip_dim=4, head_hidden=8, seed=3)
    base.update(overrides)
    return ModelConfig(**base)


def tiny_batch(cfg: ModelConfig, rng, B: int = 2):
    x = rng.standard_normal((B, cfg.T, cfg.N, cfg.c_in))
    tod = rng.integers(0, cfg.tod_slots, (B, cfg.T))
    dow = rng.integers(0, cfg.dow_slots, (B, cfg.T))
    y = rng.standard_normal((B, cfg.N, cfg.tau))
    return x, tod, dow, y


def _randomize(params, rng) -> None:
    """Replace zero/one initialisations so every path carries signal."""
    for p in params:
        p.data = p.data + rng.uniform(-0.5, 0.5, p.shape)


def op_cases(seed: int = 0) -> list[tuple[str, Callable[[], Tensor], dict[str, Tensor]]]:
    rng = np.random.default_rng(seed)
    cases = []

    def add_case(name, out_fn, params):
        with no_grad():
            shape = out_fn().shape
        cases.append((name, projected(out_fn, shape, rng), params))

    a, b = _u(rng, 3, 4), _u(rng, 4, 2)
    add_case("matmul", lambda: tn.matmul(a, b), {"a": a, "b": b})
    ab, bb = _u(rng, 2, 3, 4), _u(rng, 4, 5)
    add_case("matmul_batched", lambda: tn.matmul(ab, bb), {"a": ab, "b": bb})
    g2, x4 = _u(rng, 6, 3), _u(rng, 2, 6, 3, 4)
    add_case("contract_nodes", lambda: tn.contract_nodes(g2, x4), {"graph": g2, "x": x4})
    g3 = _u(rng, 4, 6, 3)
    add_case("contract_nodes_per_channel", lambda: tn.contract_nodes(g3, x4), {"graph": g3, "x": x4})
    z = _u(rng, 2, 5, 3)
    add_case("softmax_columns", lambda: tn.softmax_columns(z), {"z": z})
    xl, gain, bias = _u(rng, 2, 3, 4), _u(rng, 4), _u(rng, 4)
    add_case("layernorm", lambda: tn.layernorm(xl, gain, bias), {"x": xl, "gain": gain, "bias": bias})
    r = _u(rng, 3, 4)
    add_case("relu", lambda: tn.relu(r), {"x": r})
    add_case("abs", lambda: tn.abs_(r), {"x": r})
    p, q, qb = _u(rng, 3, 4), _u(rng, 3, 4), _u(rng, 4)
    add_case("add", lambda: tn.add(p, qb), {"x": p, "y": qb})
    add_case("sub", lambda: tn.sub(p, q), {"x": p, "y": q})
    add_case("hadamard", lambda: tn.hadamard(p, qb), {"x": p, "y": qb})
    add_case("scale", lambda: tn.scale(p, -1.5), {"x": p})
    add_case("reshape", lambda: tn.reshape(p, (2, 6)), {"x": p})
    add_case("transpose_axes", lambda: tn.transpose_axes(ab, (2, 0, 1)), {"x": ab})
    table = _u(rng, 7, 2)
    idx = np.array([[3, 1], [3, 6]])
    add_case("embedding_lookup", lambda: tn.embedding_lookup(table, idx), {"table": table})
    cases.append(("mean_all", lambda: tn.mean_all(tn.hadamard(p, p)), {"x": p}))

    bank = AdaptiveGraphBank(_u(rng, 6, 2), _u(rng, 3, 6, 2))
    xg = _u(rng, 1, 6, 2, 3)
    add_case("fast_aggregate", lambda: fast_aggregate(bank, xg),
             {"E": bank.global_embedding, "e": bank.local, "x": xg})
    proj = FastProjection(_u(rng, 2, 6), _u(rng, 6))
    agg = _u(rng, 1, 2, 2, 3)
    add_case("fast_project", lambda: fast_project(proj, agg), {"weight": proj.weight, "bias": proj.bias, "agg": agg})
    adj = _u(rng, 6, 6)
    add_case("dense_graph_apply", lambda: dense_graph_apply(adj, xg), {"adj": adj, "x": xg})

    T, H, L, d, de, N = 2, 4, 3, 3, 2, 5
    k = StsgKernelParams.init(T, H, L, d, de, rng)
    _randomize([k.ep_b2, k.ep_b3, k.out_b], rng)
    add_case("static_kernel_part", lambda: static_kernel_part(k),
             {"upsilon": k.upsilon, "ep_w2": k.ep_w2, "ep_b2": k.ep_b2, "ep_w3": k.ep_w3, "ep_b3": k.ep_b3})
    aggk = _u(rng, 2, de, T, H)
    add_case("build_kernel", lambda: build_kernel(k, aggk),
             {"upsilon": k.upsilon, "dyn_w": k.dyn_w, "ep_w2": k.ep_w2, "agg": aggk})

    layer = LayerParams.init(N, T, H, de, L, d, rng)
    _randomize([layer.ln1_gain, layer.ln1_bias, layer.ln2_gain, layer.ln2_bias,
                layer.ffn_b4, layer.ffn_b5, layer.inter_b6, layer.proj.bias], rng)
    xs = _u(rng, 2, N, T, H)
    lp = dict(layer.named_parameters())
    add_case("stsg_convolve", lambda: stsg_convolve(layer, xs), {**lp, "x": xs})
    add_case("layer_forward", lambda: layer_forward(layer, xs), {**lp, "x": xs})

    pred, target = _u(rng, 2, 3, 4), Tensor(rng.uniform(-2, 2, (2, 3, 4)))
    cases.append(("mae_loss", lambda: mae_loss(pred, target), {"pred": pred}))
    return cases


def model_case(seed: int = 0):
    rng = np.random.default_rng(seed)
    cfg = tiny_config(seed=seed)
    model = FasterSTS(cfg)
    _randomize([p for n, p in model.named_parameters() if "table" not in n], rng)
    # only the visited slot rows carry gradient; make them non-zero
    x, tod, dow, y = tiny_batch(cfg, rng)
    model.embedding.tod_table.data[tod.reshape(-1)] = rng.uniform(-0.5, 0.5, (tod.size, cfg.H))
    target = Tensor(y)
    fn = lambda: mae_loss(forward(model, x, tod, dow), target)  # noqa: E731
    return "tiny_model", fn, dict(model.named_parameters())


def run_suite(seed: int = 0, max_entries: int = 48) -> list[CheckResult]:
    results = []
    for name, fn, params in op_cases(seed):
        errs = check(fn, params, seed=seed)
        results.append(CheckResult(name, max(errs.values()), OP_TOL))
    name, fn, params = model_case(seed)
    errs = check(fn, params, max_entries=max_entries, seed=seed)
    results.append(CheckResult(name, max(errs.values()), MODEL_TOL))
    return results
