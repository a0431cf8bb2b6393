"""Executable network built from a NetSpec."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from ..errors import ShapeError
from ..netspec import NetSpec, render_netspec, validate
from .layers import FtdnnLayer, ResNetStack, TdnnLayer, init_params, relu, stats_pool


@dataclass
class ForwardOutput:
    """Everything a loss or an extractor needs from one forward pass.

    ``frames[branch][i]`` is the post-ReLU frame output of layer i;
    ``hidden[branch]`` is the input of that branch's output layer.
    """

    frames: dict = field(default_factory=dict)
    preact: dict = field(default_factory=dict)
    pooled: torch.Tensor | None = None
    tap: torch.Tensor | None = None
    hidden: dict = field(default_factory=dict)


@dataclass(frozen=True)
class Embedding:
    vector: np.ndarray
    source: str
    utterance_id: str = ""

    @property
    def dim(self) -> int:
        return len(self.vector)


def _key(branch: str, index: int) -> str:
    return f"{branch}_{index}"


class EmbedderNet(nn.Module):
    def __init__(self, spec: NetSpec, feat_dim: int, dtype=torch.float32, seed: int = 0):
        super().__init__()
        report = validate(spec)
        if not report.ok:
            raise ShapeError(f"invalid netspec {spec.name!r}:\n{report}")
        self.spec = spec
        self.feat_dim = feat_dim
        self.layers = nn.ModuleDict()
        self.out_weight = nn.ParameterDict()
        self.out_bias = nn.ParameterDict()
        self._owner: dict[tuple[str, int], tuple[str, int]] = {}
        self._branch_order = self._order_branches()
        for branch in self._branch_order:
            self._build_branch(branch)
        self.to(dtype)
        gen = torch.Generator().manual_seed(seed)
        init_params(self, gen)

    # -- construction ----------------------------------------------------------

    def _order_branches(self) -> list[str]:
        # shared layers are cached under their owner, so any order works; keep the tap branch first
        tb = self.spec.tap[0]
        return [tb] + [b for b in self.spec.branch_names if b != tb]

    def _input_dim(self, branch: str, layer, sizes: dict) -> int:
        if layer.index == 1:
            return self.feat_dim
        dim = sizes[(branch, layer.index - 1)]
        for s in layer.skip_inputs:
            dim += sizes[(branch, s)]
        return dim

    def _build_branch(self, branch: str) -> None:
        spec = self.spec
        borrowed = spec.shared_with(branch)
        sizes = self._sizes = getattr(self, "_sizes", {})
        for layer in spec.branch(branch):
            key = (branch, layer.index)
            if layer.index in borrowed:
                self._owner[key] = (borrowed[layer.index], layer.index)
                sizes[key] = layer.size
                continue
            self._owner[key] = key
            name = _key(branch, layer.index)
            if layer.kind == "pooling":
                sizes[key] = layer.size
                continue
            if layer.kind == "output_softmax":
                n_cls = spec.num_classes(branch)
                if n_cls is None:
                    raise ShapeError(f"branch {branch!r} has an output layer but no class count")
                in_dim = sizes[(branch, layer.index - 1)]
                self.out_weight[branch] = nn.Parameter(torch.empty(n_cls, in_dim))
                self.out_bias[branch] = nn.Parameter(torch.zeros(n_cls))
                continue
            in_dim = self._input_dim(branch, layer, sizes)
            if layer.kind == "resnet_block_stack":
                if layer.index != 1:
                    raise ShapeError(f"{name}: residual stack must be the first layer")
                mod = ResNetStack(layer.size, layer.stages or (3, 4, 6, 3))
            elif layer.kind == "ftdnn":
                mod = FtdnnLayer(in_dim, layer.size, layer.inner_size, [c.offsets for c in layer.contexts])
            else:
                mod = TdnnLayer(in_dim, layer.size, layer.context(0).offsets)
            self.layers[name] = mod
            sizes[key] = layer.size

    def module_for(self, branch: str, index: int) -> nn.Module:
        owner = self._owner[(branch, index)]
        return self.layers[_key(*owner)]

    def ftdnn_factors(self) -> list[nn.Linear]:
        """First (constrained) factor of every factorized layer."""
        return [m.factors[0] for m in self.layers.values() if isinstance(m, FtdnnLayer)]

    # -- execution ---------------------------------------------------------------

    def _run_frame_layers(self, branch: str, feats: torch.Tensor, out: ForwardOutput, cache: dict):
        spec = self.spec
        frames = out.frames.setdefault(branch, {0: feats})
        for layer in spec.branch(branch):
            if not spec.is_frame_level(branch, layer.index):
                break
            owner = self._owner[(branch, layer.index)]
            if owner in cache:
                pre = cache[owner]
            else:
                x = frames[layer.index - 1]
                if layer.skip_inputs:
                    x = torch.cat([x] + [frames[s] for s in layer.skip_inputs], dim=2)
                if x.shape[2] != self._expected_in(branch, layer):
                    raise ShapeError(
                        f"layer {branch}:{layer.index} expects input dim {self._expected_in(branch, layer)}, got {x.shape[2]}"
                    )
                pre = self.module_for(branch, layer.index)(x)
                cache[owner] = pre
            out.preact[(branch, layer.index)] = pre
            frames[layer.index] = relu(pre)

    def _expected_in(self, branch, layer) -> int:
        if layer.kind == "resnet_block_stack":
            return self.feat_dim
        return self._input_dim(branch, layer, self._sizes)

    def after_tap(self, tap_preact: torch.Tensor, branch: str | None = None) -> torch.Tensor:
        """ReLU + remaining segment-level layers; returns the output layer's input."""
        branch = branch or self.spec.tap[0]
        tap_idx = self.spec.tap[1]
        h = relu(tap_preact)
        for layer in self.spec.branch(branch):
            if layer.index <= tap_idx or layer.kind == "output_softmax":
                continue
            h = relu(self.module_for(branch, layer.index)(h))
        return h

    def forward(self, feats: torch.Tensor) -> ForwardOutput:
        if feats.dim() == 2:
            feats = feats.unsqueeze(0)
        if feats.shape[1] < 1:
            raise ShapeError("forward needs at least one frame")
        if feats.shape[2] != self.feat_dim:
            raise ShapeError(f"feature dim {feats.shape[2]} != network input dim {self.feat_dim}")
        spec = self.spec
        out = ForwardOutput()
        cache: dict = {}
        for branch in self._branch_order:
            self._run_frame_layers(branch, feats, out, cache)
        tb, tap_idx = spec.tap
        layers = spec.branch(tb)
        pool = spec.pooling_layer(tb)
        x = out.frames[tb][pool.index - 1]
        if spec.concat_pool is not None:
            x = torch.cat([x, out.preact[spec.concat_pool]], dim=2)
        out.pooled = stats_pool(x)
        h = out.pooled
        for layer in layers:
            if layer.index <= pool.index:
                continue
            if layer.index == tap_idx:
                out.tap = self.module_for(tb, tap_idx)(h)
                break
            h = relu(self.module_for(tb, layer.index)(h))
        out.hidden[tb] = self.after_tap(out.tap, tb)
        for branch in spec.branch_names:
            if branch == tb or spec.num_classes(branch) is None:
                continue
            last_frame = max(i for i in out.frames[branch])
            out.hidden[branch] = out.frames[branch][last_frame]
        return out

    # -- convenience -------------------------------------------------------------

    @property
    def dtype(self):
        return next(self.parameters()).dtype

    def embed(self, feats: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            x = torch.as_tensor(np.asarray(feats), dtype=self.dtype)
            return self.forward(x).tap[0].double().numpy()

    def header(self) -> dict:
        return {"netspec": render_netspec(self.spec), "feat_dim": self.feat_dim}


def extract_embedding(model: EmbedderNet, feats, utterance_id: str = "") -> Embedding:
    """Tap pre-activation for one utterance (rows = post-VAD frames)."""
    values = feats.values if hasattr(feats, "values") else np.asarray(feats)
    if len(values) == 0:
        from ..errors import EmptyInputError

        raise EmptyInputError(f"{utterance_id or 'utterance'} has no frames")
    return Embedding(model.embed(values), source=model.spec.name, utterance_id=utterance_id)
