"""Layer containers, parameter trees, and the binary checkpoint format.

Layers are thin wrappers over the primitives in fewgraph.tensor: they own
parameter Tensors, expose them through a flat name -> Tensor mapping, and
stay stateless otherwise (train/eval is an explicit call argument, never a
mode flag).

Initialization: convolution and fully-connected weights and biases are drawn
from a zero-mean uniform distribution scaled by fan-in,
U(-sqrt(3/fan_in), sqrt(3/fan_in)), so each layer preserves activation
variance; batchnorm scale starts at 1 and shift at 0. Nonzero bias init
matters: a zero bias would park every hidden unit of the pairwise metric
exactly on the leaky-relu kink for the zero-difference diagonal, where
gradients are one-sided.
"""

from __future__ import annotations

import struct

import numpy as np

from . import tensor as T
from .tensor import Tensor


class CheckpointError(RuntimeError):
    pass


class Module:
    """Base container: children and parameters registered by attribute name."""

    def __init__(self) -> None:
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, Module] = {}
        self._buffers: dict[str, np.ndarray] = {}

    def register(self, name: str, param: Tensor) -> Tensor:
        self._params[name] = param
        return param

    def register_child(self, name: str, child: "Module") -> "Module":
        self._children[name] = child
        return child

    def register_buffer(self, name: str, arr: np.ndarray) -> np.ndarray:
        self._buffers[name] = arr
        return arr

    def parameters(self) -> dict[str, Tensor]:
        out = dict(self._params)
        for cname, child in self._children.items():
            for pname, p in child.parameters().items():
                out[f"{cname}.{pname}"] = p
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = dict(self._buffers)
        for cname, child in self._children.items():
            for bname, b in child.buffers().items():
                out[f"{cname}.{bname}"] = b
        return out

    def state(self) -> dict[str, np.ndarray]:
        """Everything a checkpoint needs: parameter values plus buffers."""
        out = {name: p.data for name, p in self.parameters().items()}
        out.update(self.buffers())
        return out

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        state = self.state()
        missing = sorted(set(state) - set(arrays))
        extra = sorted(set(arrays) - set(state))
        if missing or extra:
            raise CheckpointError(
                f"state name mismatch: missing {missing}, unexpected {extra}"
            )
        for name, dst in state.items():
            src = arrays[name]
            if src.shape != dst.shape:
                raise CheckpointError(
                    f"shape mismatch for {name}: checkpoint {src.shape}, model {dst.shape}"
                )
            dst[...] = src

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()


def _fanin_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    # Var(w) = 1/fan_in keeps activation scale roughly constant through the
    # stack; a smaller bound compounds into vanishing edge-metric spread and
    # near-uniform adjacencies that stall episodic training.
    bound = np.sqrt(3.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        self.weight = self.register("weight", _fanin_uniform(rng, (n_in, n_out), n_in))
        self.bias = (
            self.register("bias", _fanin_uniform(rng, (n_out,), n_in)) if bias else None
        )

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class Conv2d(Module):
    """3x3 same-padding convolution without bias (the following batchnorm owns the shift)."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        super().__init__()
        self.kernel = self.register(
            "kernel", _fanin_uniform(rng, (c_out, c_in, 3, 3), c_in * 9)
        )

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.kernel)


class BatchNorm(Module):
    def __init__(self, channels: int):
        super().__init__()
        self.gamma = self.register("gamma", Tensor(np.ones(channels), requires_grad=True))
        self.beta = self.register("beta", Tensor(np.zeros(channels), requires_grad=True))
        self.moments = T.RunningMoments(channels)
        self.register_buffer("running_mean", self.moments.mean)
        self.register_buffer("running_var", self.moments.var)

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        return T.batchnorm(x, self.gamma, self.beta, self.moments, train)


class Dropout(Module):
    def __init__(self, p: float):
        super().__init__()
        self.p = p

    def __call__(self, x: Tensor, train: bool, rng: np.random.Generator | None = None) -> Tensor:
        return T.dropout(x, self.p, train, rng)


class MLP(Module):
    """Fully-connected stack with leaky-ReLU between layers, none after the last."""

    def __init__(self, widths: list[int], rng: np.random.Generator, slope: float = 0.2):
        super().__init__()
        if len(widths) < 2:
            raise ValueError("MLP needs at least input and output widths")
        self.slope = slope
        self.layers = [
            self.register_child(f"fc{i}", Linear(widths[i], widths[i + 1], rng))
            for i in range(len(widths) - 1)
        ]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i + 1 < len(self.layers):
                x = T.leaky_relu(x, self.slope)
        return x


_MAGIC = b"FGCK"


def save_checkpoint(path: str, arrays: dict[str, np.ndarray]) -> None:
    """Flat binary of named blocks: name length, name bytes, rank, extents, float64 payload.

    All integers and floats little-endian. Blocks are written in sorted name
    order so the byte stream is a pure function of the contents.
    """
    with open(path, "wb") as fh:
        for name in sorted(arrays):
            arr = np.asarray(arrays[name], dtype="<f8")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path: str) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        blob = fh.read()
    off = 0

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise CheckpointError(f"truncated checkpoint {path!r} at byte {off}")
        piece = blob[off : off + n]
        off += n
        return piece

    while off < len(blob):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank)) if rank else ()
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape)
        if name in out:
            raise CheckpointError(f"duplicate block {name!r} in {path!r}")
        out[name] = data.astype(np.float64)
    return out
