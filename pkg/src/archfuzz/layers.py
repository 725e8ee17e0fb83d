"""Layer kind registry: arity, parameter schemas, shape rules, weight shapes."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

from .ir import Shape, ShapeError, check_shape, element_count

# Pseudo-kinds that exist in graphs but are never picked by the fuzzer's
# selection loop and do not count toward functionality coverage.
PSEUDO_KINDS = ("input",)


@dataclass(frozen=True)
class LayerKind:
    name: str
    arity: str  # "SI" | "MI"
    category: str
    min_rank: int = 1
    max_rank: int = 4
    shape_fn: Callable[[list[Shape], dict], Shape] = None
    weights_fn: Callable[[Shape, dict], list[Shape]] = None
    sample_fn: Optional[Callable] = None  # (in_shapes, rng, biased) -> params
    output_scale: float = 1.0  # loss-style amplification factor, unused for layers
    max_arity: Optional[int] = None  # MI only: cap on merge fan-in

    def accepts_rank(self, rank: int) -> bool:
        return self.min_rank <= rank <= self.max_rank

    def accepts_arity(self, n_inputs: int) -> bool:
        return self.max_arity is None or n_inputs <= self.max_arity

    def output_shape(self, in_shapes: list[Shape], params: dict) -> Shape:
        for s in in_shapes:
            if not self.accepts_rank(len(s)):
                raise ShapeError(f"rank {len(s)} outside [{self.min_rank},{self.max_rank}]")
        if self.arity == "MI" and len(in_shapes) < 2:
            raise ShapeError("MI kind requires >= 2 inputs")
        if self.arity == "SI" and len(in_shapes) != 1:
            raise ShapeError("SI kind requires exactly 1 input")
        return self.shape_fn(in_shapes, params)

    def weight_shapes(self, in_shape: Shape, params: dict) -> list[Shape]:
        if self.weights_fn is None:
            return []
        return self.weights_fn(in_shape, params)

    def sample_params(self, in_shapes: list[Shape], rng, biased: bool = False) -> dict:
        if self.sample_fn is None:
            return {}
        return self.sample_fn(in_shapes, rng, biased)


def conv_out_extent(n: int, k: int, s: int, padding: str) -> int:
    if padding == "same":
        return -(-n // s)
    if n < k:
        raise ShapeError(f"valid padding requires extent {n} >= kernel {k}")
    return (n - k) // s + 1


def _require_same(shapes: list[Shape]) -> Shape:
    first = shapes[0]
    for s in shapes[1:]:
        if s != first:
            raise ShapeError(f"MI shape mismatch: {first} vs {s}")
    return first


def _conv_shape(nd: int):
    def fn(in_shapes, params):
        (s,) = in_shapes
        if len(s) != nd + 1:
            raise ShapeError(f"conv{nd}d requires rank {nd + 1} input, got {s}")
        spatial = s[:-1]
        out = tuple(
            conv_out_extent(n, params["kernel"], params["strides"], params["padding"])
            for n in spatial
        )
        if any(d < 1 for d in out):
            raise ShapeError("empty spatial output")
        return out + (params["filters"],)

    return fn


def _conv_weights(nd: int):
    def fn(in_shape, params):
        k = params["kernel"]
        return [(k,) * nd + (in_shape[-1], params["filters"]), (params["filters"],)]

    return fn


def _conv_sample(nd: int, kernels=(1, 3, 5), max_filters=8):
    def fn(in_shapes, rng, biased):
        (s,) = in_shapes
        min_extent = min(s[:-1])
        padding = "same" if rng.random() < 0.5 else "valid"
        ks = [k for k in kernels if padding == "same" or k <= min_extent]
        if not ks:
            padding, ks = "same", list(kernels)
        kernel = int(rng.choice(ks))
        strides = int(rng.choice([1, 2])) if min_extent > 1 else 1
        return {
            "filters": int(rng.integers(1, max_filters + 1)),
            "kernel": kernel,
            "strides": strides,
            "padding": padding,
        }

    return fn


def _pool_shape(nd: int, mode: str):
    def fn(in_shapes, params):
        (s,) = in_shapes
        if len(s) != nd + 1:
            raise ShapeError(f"{mode}_pooling{nd}d requires rank {nd + 1} input, got {s}")
        out = tuple(
            conv_out_extent(n, params["pool_size"], params["strides"], params["padding"])
            for n in s[:-1]
        )
        if any(d < 1 for d in out):
            raise ShapeError("empty spatial output")
        return out + (s[-1],)

    return fn


def _pool_sample(nd: int):
    def fn(in_shapes, rng, biased):
        (s,) = in_shapes
        extent = min(s[:-1])
        if biased:
            # Deliberately prefer the full-extent window with same padding: the
            # trigger region for location bugs in padded average pooling.
            pool = extent
            padding = "same"
        else:
            pool = int(rng.integers(1, extent + 1)) if extent > 1 else 1
            padding = "same" if rng.random() < 0.5 else "valid"
        strides = pool if rng.random() < 0.7 else 1
        return {"pool_size": max(pool, 1), "strides": max(strides, 1), "padding": padding}

    return fn


def _global_pool_shape(nd: int):
    def fn(in_shapes, params):
        (s,) = in_shapes
        if len(s) != nd + 1:
            raise ShapeError(f"global pooling requires rank {nd + 1} input, got {s}")
        return (s[-1],)

    return fn


def _dense_shape(in_shapes, params):
    (s,) = in_shapes
    return s[:-1] + (params["units"],)


def _dense_weights(in_shape, params):
    return [(in_shape[-1], params["units"]), (params["units"],)]


def _same_shape(in_shapes, params):
    return in_shapes[0]


def _reshape_shape(in_shapes, params):
    target = check_shape(tuple(params["target"]))
    if element_count(target) != element_count(in_shapes[0]):
        raise ShapeError(f"reshape element count mismatch: {in_shapes[0]} -> {target}")
    return target


def _reshape_sample(in_shapes, rng, biased):
    # random refactorization of the element count so tensor ranks drift,
    # making 1-D/3-D-only kinds reachable downstream
    n = element_count(in_shapes[0])
    rank = int(rng.integers(1, 5))
    dims = []
    rest = n
    for _ in range(rank - 1):
        divisors = [d for d in range(1, rest + 1) if rest % d == 0]
        d = int(rng.choice(divisors))
        dims.append(d)
        rest //= d
    dims.append(rest)
    rng.shuffle(dims)
    return {"target": tuple(dims)}


def _rnn_shape(in_shapes, params):
    (s,) = in_shapes
    if len(s) != 2:
        raise ShapeError(f"recurrent kinds require rank 2 input (steps, channels), got {s}")
    return (params["units"],)


def _rnn_weights(in_shape, params):
    u = params["units"]
    return [(in_shape[-1], u), (u, u), (u,)]


def _depthwise_shape(in_shapes, params):
    (s,) = in_shapes
    if len(s) != 3:
        raise ShapeError(f"depthwise_conv2d requires rank 3 input, got {s}")
    out = tuple(
        conv_out_extent(n, params["kernel"], params["strides"], params["padding"])
        for n in s[:-1]
    )
    if any(d < 1 for d in out):
        raise ShapeError("empty spatial output")
    return out + (s[-1],)


def _depthwise_sample(in_shapes, rng, biased):
    (s,) = in_shapes
    min_extent = min(s[:-1])
    padding = "same" if rng.random() < 0.5 else "valid"
    ks = [k for k in (1, 3) if padding == "same" or k <= min_extent]
    if not ks:
        padding, ks = "same", [1, 3]
    return {"kernel": int(rng.choice(ks)),
            "strides": int(rng.choice([1, 2])) if min_extent > 1 else 1,
            "padding": padding}


def build_registry() -> dict[str, LayerKind]:
    kinds: list[LayerKind] = [
        LayerKind("input", "SI", "reshape", shape_fn=_same_shape),
        LayerKind("dense", "SI", "dense", shape_fn=_dense_shape, weights_fn=_dense_weights,
                  sample_fn=lambda i, rng, b: {"units": int(rng.integers(1, 9))}),
        LayerKind("conv1d", "SI", "convolution", 2, 2, _conv_shape(1), _conv_weights(1), _conv_sample(1)),
        LayerKind("conv2d", "SI", "convolution", 3, 3, _conv_shape(2), _conv_weights(2), _conv_sample(2)),
        LayerKind("conv3d", "SI", "convolution", 4, 4, _conv_shape(3), _conv_weights(3),
                  _conv_sample(3, kernels=(1, 3), max_filters=4)),
        LayerKind("depthwise_conv2d", "SI", "convolution", 3, 3, _depthwise_shape,
                  weights_fn=lambda s, p: [(p["kernel"], p["kernel"], s[-1])],
                  sample_fn=_depthwise_sample),
        LayerKind("max_pooling1d", "SI", "pooling", 2, 2, _pool_shape(1, "max"), sample_fn=_pool_sample(1)),
        LayerKind("max_pooling2d", "SI", "pooling", 3, 3, _pool_shape(2, "max"), sample_fn=_pool_sample(2)),
        LayerKind("average_pooling1d", "SI", "pooling", 2, 2, _pool_shape(1, "avg"), sample_fn=_pool_sample(1)),
        LayerKind("average_pooling2d", "SI", "pooling", 3, 3, _pool_shape(2, "avg"), sample_fn=_pool_sample(2)),
        LayerKind("global_max_pooling1d", "SI", "pooling", 2, 2, _global_pool_shape(1)),
        LayerKind("global_max_pooling2d", "SI", "pooling", 3, 3, _global_pool_shape(2)),
        LayerKind("global_average_pooling1d", "SI", "pooling", 2, 2, _global_pool_shape(1)),
        LayerKind("global_average_pooling2d", "SI", "pooling", 3, 3, _global_pool_shape(2)),
        LayerKind("batch_normalization", "SI", "normalization", shape_fn=_same_shape,
                  weights_fn=lambda s, p: [(s[-1],), (s[-1],)]),
        LayerKind("relu", "SI", "activation", shape_fn=_same_shape),
        LayerKind("leaky_relu", "SI", "activation", shape_fn=_same_shape,
                  sample_fn=lambda i, rng, b: {"alpha": float(rng.choice([0.01, 0.1, 0.3]))}),
        LayerKind("elu", "SI", "activation", shape_fn=_same_shape,
                  sample_fn=lambda i, rng, b: {"alpha": float(rng.choice([0.5, 1.0]))}),
        LayerKind("sigmoid", "SI", "activation", shape_fn=_same_shape),
        LayerKind("tanh", "SI", "activation", shape_fn=_same_shape),
        LayerKind("softmax", "SI", "activation", shape_fn=_same_shape),
        LayerKind("simple_rnn", "SI", "recurrent", 2, 2, _rnn_shape, _rnn_weights,
                  sample_fn=lambda i, rng, b: {"units": int(rng.integers(1, 9))}),
        LayerKind("flatten", "SI", "reshape", shape_fn=lambda i, p: (element_count(i[0]),)),
        LayerKind("reshape", "SI", "reshape", shape_fn=_reshape_shape, sample_fn=_reshape_sample),
        LayerKind("add", "MI", "merge", shape_fn=lambda i, p: _require_same(i)),
        # elementwise products amplify magnitudes geometrically with fan-in, so
        # wide multiply merges are kept out of the generated space
        LayerKind("multiply", "MI", "merge", shape_fn=lambda i, p: _require_same(i),
                  max_arity=3),
        LayerKind("average", "MI", "merge", shape_fn=lambda i, p: _require_same(i)),
        LayerKind("maximum", "MI", "merge", shape_fn=lambda i, p: _require_same(i)),
        LayerKind("concatenate", "MI", "merge",
                  shape_fn=lambda i, p: _require_same(i)[:-1] + (_require_same(i)[-1] * len(i),)),
    ]
    return {k.name: k for k in kinds}


REGISTRY = build_registry()


def selectable_kinds(registry=None, excluded: tuple[str, ...] = ()) -> dict[str, LayerKind]:
    registry = registry or REGISTRY
    return {
        name: k for name, k in registry.items()
        if name not in PSEUDO_KINDS and name not in excluded
    }


def si_kinds(registry=None, excluded=()) -> list[LayerKind]:
    return [k for k in selectable_kinds(registry, tuple(excluded)).values() if k.arity == "SI"]


def mi_kinds(registry=None, excluded=()) -> list[LayerKind]:
    return [k for k in selectable_kinds(registry, tuple(excluded)).values() if k.arity == "MI"]


# ---------------------------------------------------------------------------
# Loss registry

@dataclass(frozen=True)
class LossKind:
    name: str
    label_style: str  # "real" | "unit" | "onehot" | "nonzero"
    output_scale: float = 1.0
    preferred_head: Optional[str] = None  # activation appended at the sink


LOSS_REGISTRY: dict[str, LossKind] = {
    loss.name: loss
    for loss in [
        LossKind("mean_squared_error", "real"),
        LossKind("mean_absolute_percentage_error", "nonzero", output_scale=100.0),
        LossKind("binary_crossentropy", "unit", preferred_head="sigmoid"),
        LossKind("categorical_crossentropy", "onehot", preferred_head="softmax"),
        LossKind("categorical_hinge", "onehot", preferred_head="softmax"),
    ]
}
