"""Multilayer perceptrons over flat parameter vectors, plus checkpoint I/O."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError

OUTPUT_TAGS = ("identity", "nonneg", "squashed-gaussian-head")

_MAGIC = b"ALAMCKPT"


@dataclass(frozen=True)
class Architecture:
    input_dim: int
    output_dim: int
    hidden: tuple[int, ...] = (256, 256)
    output: str = "identity"

    def __post_init__(self) -> None:
        if self.output not in OUTPUT_TAGS:
            raise ConfigurationError(f"unknown output tag {self.output!r}")
        if self.input_dim < 1 or self.output_dim < 1:
            raise ConfigurationError("network dimensions must be positive")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @property
    def layout(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden, self.output_dim]
        return list(zip(dims[:-1], dims[1:]))

    @property
    def n_params(self) -> int:
        return sum(fi * fo + fo for fi, fo in self.layout)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "Architecture":
        return cls(
            input_dim=int(d["input_dim"]),
            output_dim=int(d["output_dim"]),
            hidden=tuple(d["hidden"]),
            output=d["output"],
        )


def init_params(
    arch: Architecture,
    rng: np.random.Generator,
    final_scale: float = 1.0,
    final_bias: float | None = None,
) -> np.ndarray:
    """Fan-in scaled uniform init, ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``.

    ``final_scale`` shrinks the last layer's weights; ``final_bias`` overrides
    its bias with a constant.
    """
    chunks = []
    layout = arch.layout
    for i, (fi, fo) in enumerate(layout):
        bound = 1.0 / np.sqrt(fi)
        W = rng.uniform(-bound, bound, size=(fi, fo))
        b = rng.uniform(-bound, bound, size=fo)
        if i == len(layout) - 1:
            W *= final_scale
            if final_bias is not None:
                b = np.full(fo, float(final_bias))
        chunks += [W.ravel(), b]
    return np.concatenate(chunks)


def inverse_softplus(y: float) -> float:
    return float(np.log(np.expm1(y)))


class NetworkHandle:
    """A parameterized function: architecture plus one flat parameter vector."""

    def __init__(self, arch: Architecture, params: np.ndarray | None = None,
                 rng: np.random.Generator | None = None, **init_kw) -> None:
        self.arch = arch
        if params is None:
            params = init_params(arch, rng if rng is not None else np.random.default_rng(0), **init_kw)
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (arch.n_params,):
            raise ConfigurationError(
                f"expected {arch.n_params} parameters, got shape {params.shape}"
            )
        self.params = params.copy()

    def __repr__(self) -> str:
        return f"NetworkHandle({self.arch}, n_params={self.params.size})"

    def clone(self) -> "NetworkHandle":
        return NetworkHandle(self.arch, self.params)

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.arch.input_dim:
            raise ConfigurationError(
                f"input has {x.shape[-1]} features, network expects {self.arch.input_dim}"
            )
        return x

    def preactivation(self, x: np.ndarray) -> np.ndarray:
        x = self._check_input(x)
        squeeze = x.ndim == 1
        out = ad.mlp_apply(ad.Tensor(self.params), ad.Tensor(np.atleast_2d(x)), self.arch.layout).data
        return out[0] if squeeze else out

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Evaluate without recording a graph; output map applied."""
        z = self.preactivation(x)
        if self.arch.output == "nonneg":
            return ad.softplus_np(z)
        return z

    __call__ = forward

    def apply(self, x, params: ad.Tensor | None = None) -> ad.Tensor:
        """Graph-recording evaluation.

        ``params`` defaults to a constant wrapping of the handle's own vector;
        pass a differentiable leaf to obtain parameter gradients.
        """
        x = ad.as_tensor(x)
        if x.shape[-1] != self.arch.input_dim:
            raise ConfigurationError(
                f"input has {x.shape[-1]} features, network expects {self.arch.input_dim}"
            )
        p = params if params is not None else ad.Tensor(self.params)
        z = ad.mlp_apply(p, x, self.arch.layout)
        if self.arch.output == "nonneg":
            return ad.softplus(z)
        return z

    def leaf(self) -> ad.Tensor:
        """A differentiable leaf sharing this handle's current values."""
        return ad.Tensor(self.params, requires_grad=True)


# checkpoints: magic, u64 header length, JSON header, little-endian float64 payload


def save_checkpoint(path: str | Path, networks: Mapping[str, NetworkHandle],
                    extra: Mapping | None = None) -> None:
    header = {"networks": {}, "extra": dict(extra or {})}
    offset = 0
    for name, net in networks.items():
        header["networks"][name] = {
            "arch": net.arch.to_dict(),
            "offset": offset,
            "size": int(net.params.size),
        }
        offset += net.params.size
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = np.concatenate([n.params for n in networks.values()]) if networks else np.zeros(0)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(payload.astype("<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[dict[str, NetworkHandle], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ConfigurationError(f"{path} is not a checkpoint file")
    (n,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + n].decode("utf-8"))
    payload = np.frombuffer(raw[16 + n :], dtype="<f8")
    nets = {}
    for name, entry in header["networks"].items():
        arch = Architecture.from_dict(entry["arch"])
        lo = entry["offset"]
        nets[name] = NetworkHandle(arch, payload[lo : lo + entry["size"]].astype(np.float64))
    return nets, header["extra"]
