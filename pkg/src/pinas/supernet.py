"""Weight-sharing supernet: shared stem/heads, per-site candidate blocks,
path-conditional forward, subnet extraction, and BN recalibration.

A supernet built with `fixed_arch` contains exactly one candidate per site
(keeping the option's original name), which doubles as the standalone subnet:
`extract_subnet` copies the shared weights into one, `build_subnet` gives a
fresh-initialized one for from-scratch training. Because both variants run
the same layer objects in the same order, extraction is bit-for-bit exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape
from .errors import ConfigError, ContractError
from .layers import AvgPool, BatchNorm, BnMode, Conv, ForwardCtx, Linear
from .seeding import stream
from .space import ArchEncoding, CellSpace, ChainSpace, Space
from .store import ParameterStore
from .tape import Tensor

HEADS = ("project", "features", "classify")


@dataclass
class SupernetConfig:
    in_channels: int = 2
    width: int = 16
    embed_dim: int = 64
    num_classes: int = 8
    cells_per_stage: int = 1  # cell spaces only
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1


@dataclass
class PathContext:
    arch: ArchEncoding
    bn_mode: BnMode = BnMode.BATCH_STATS
    train_flag: bool = False

    def fctx(self, **kw) -> ForwardCtx:
        return ForwardCtx(bn_mode=self.bn_mode, train_flag=self.train_flag, **kw)


class Reduction:
    """1x1 strided conv + BN used as residual downsample and stage reducer."""

    def __init__(self, name, rng, c, stride, eps, mom):
        self.name = name
        self.conv = Conv(f"{name}.conv", rng, c, c, 1, stride=stride, pad=0, groups=1)
        self.bn = BatchNorm(f"{name}.bn", c, eps, mom)

    def named_layers(self):
        return [(self.conv.name, self.conv), (self.bn.name, self.bn)]

    def forward(self, x, fctx):
        return self.bn.forward(self.conv.forward(x, fctx), fctx)


class ChainBlock:
    """Main branch of a chain option: `depth` grouped 3x3 convs + one BN.

    ReLU sits between convs (never after the last; the site adds the residual
    first). All convs keep the channel count, so every option's conv
    parameter total is depth * 9C^2/groups.
    """

    def __init__(self, name, rng, c, depth, groups, stride, eps, mom, own_down):
        if c % groups:
            raise ConfigError(f"block '{name}': groups={groups} must divide width {c}")
        self.name = name
        self.convs = [
            Conv(f"{name}.conv{t}", rng, c, c, 3, stride=(stride if t == 0 else 1), pad=1, groups=groups)
            for t in range(depth)
        ]
        self.bn = BatchNorm(f"{name}.bn", c, eps, mom)
        self.down = Reduction(f"{name}.down", rng, c, stride, eps, mom) if own_down else None

    def named_layers(self):
        out = [(conv.name, conv) for conv in self.convs] + [(self.bn.name, self.bn)]
        if self.down is not None:
            out += self.down.named_layers()
        return out

    def forward_main(self, x, fctx):
        h = x
        for t, conv in enumerate(self.convs):
            if t:
                h = tape.relu(h)
            h = conv.forward(h, fctx)
        return self.bn.forward(h, fctx)


class ReLUConvBN:
    def __init__(self, name, rng, c, k, eps, mom):
        self.name = name
        self.conv = Conv(f"{name}.conv", rng, c, c, k, stride=1, pad=k // 2, groups=1)
        self.bn = BatchNorm(f"{name}.bn", c, eps, mom)

    def named_layers(self):
        return [(self.conv.name, self.conv), (self.bn.name, self.bn)]

    def forward(self, x, fctx):
        return self.bn.forward(self.conv.forward(tape.relu(x), fctx), fctx)


class PoolOp:
    def __init__(self, name):
        self.name = name
        self.pool = AvgPool(f"{name}.pool", 3, 1, 1)

    def named_layers(self):
        return []

    def forward(self, x, fctx):
        return self.pool.forward(x, fctx)


class SkipOp:
    def __init__(self, name):
        self.name = name

    def named_layers(self):
        return []

    def forward(self, x, fctx):
        return x


class ZeroOp:
    def __init__(self, name):
        self.name = name

    def named_layers(self):
        return []

    def forward(self, x, fctx):
        return tape.constant(np.zeros_like(x.data))


def make_cell_op(name, op, rng, c, eps, mom):
    if op == "zero":
        return ZeroOp(name)
    if op == "skip_connect":
        return SkipOp(name)
    if op == "conv1x1":
        return ReLUConvBN(name, rng, c, 1, eps, mom)
    if op == "conv3x3":
        return ReLUConvBN(name, rng, c, 3, eps, mom)
    if op == "avgpool3x3":
        return PoolOp(name)
    raise ConfigError(f"unknown cell op '{op}'")


class Supernet:
    """Search-space-shaped network with shared stem, heads, and reductions.

    With `fixed_arch` set, only the chosen candidate exists at each site and
    the instance acts as the standalone subnet for that architecture.
    """

    def __init__(
        self,
        space: Space,
        cfg: SupernetConfig,
        seed: int,
        fixed_arch: ArchEncoding | None = None,
    ):
        self.space = space
        self.cfg = cfg
        self.seed = seed
        self.fixed_arch = fixed_arch
        rng = stream(seed, "supernet/init")
        c = cfg.width
        eps, mom = cfg.bn_eps, cfg.bn_momentum

        self.stem_conv = Conv("stem.conv", rng, cfg.in_channels, c, 3, 1, 1, 1)
        self.stem_bn = BatchNorm("stem.bn", c, eps, mom)

        if fixed_arch is not None:
            self.validate_arch(fixed_arch)

        # site -> {choice index -> block position}; fixed nets hold 1 block/site
        self.site_blocks: list[list] = []
        self._choice_pos: list[dict[int, int]] = []
        self.site_downs: list[Reduction | None] = []
        self.cells: list[list[list]] = []  # cell space: [cell][site] -> candidates

        if isinstance(space, ChainSpace):
            for i in range(space.num_layers):
                stride = space.strides[i]
                opts = range(len(space.options)) if fixed_arch is None else [fixed_arch.choices[i]]
                blocks, posmap = [], {}
                for k in opts:
                    depth, groups = space.options[k]
                    own_down = stride > 1 and not space.downsample_shared
                    posmap[k] = len(blocks)
                    blocks.append(
                        ChainBlock(f"site{i}.opt{k}", rng, c, depth, groups, stride, eps, mom, own_down)
                    )
                self.site_blocks.append(blocks)
                self._choice_pos.append(posmap)
                if stride > 1 and space.downsample_shared:
                    self.site_downs.append(Reduction(f"site{i}.down", rng, c, stride, eps, mom))
                else:
                    self.site_downs.append(None)
            self.macro_reductions: list[Reduction] = []
        elif isinstance(space, CellSpace):
            num_cells = 3 * cfg.cells_per_stage
            self.macro_reductions = []
            for j in range(num_cells):
                cell_sites = []
                for i in range(space.num_sites):
                    opts = (
                        range(len(space.op_set)) if fixed_arch is None else [fixed_arch.choices[i]]
                    )
                    cands, posmap = [], {}
                    for k in opts:
                        posmap[k] = len(cands)
                        cands.append(
                            make_cell_op(f"cell{j}.site{i}.opt{k}", space.op_set[k], rng, c, eps, mom)
                        )
                    cell_sites.append(cands)
                    if j == 0:
                        self._choice_pos.append(posmap)
                self.cells.append(cell_sites)
                stage_end = (j + 1) % cfg.cells_per_stage == 0
                if stage_end and len(self.macro_reductions) < 2:
                    r = len(self.macro_reductions)
                    self.macro_reductions.append(Reduction(f"reduce{r}", rng, c, 2, eps, mom))
        else:
            raise ConfigError(f"unsupported space type {type(space).__name__}")

        # batch normalization between the projector layers keeps the batch
        # embeddings spread out at init instead of sharing one direction
        self.proj_fc1 = Linear("proj.fc1", rng, c, c)
        self.proj_bn = BatchNorm("proj.bn", c, eps, mom)
        self.proj_fc2 = Linear("proj.fc2", rng, c, cfg.embed_dim)
        self.classifier = Linear("cls", rng, c, cfg.num_classes)

    # ---- structure walks -------------------------------------------------

    def named_layers(self):
        out = [(self.stem_conv.name, self.stem_conv), (self.stem_bn.name, self.stem_bn)]
        if isinstance(self.space, ChainSpace):
            for i, blocks in enumerate(self.site_blocks):
                for b in blocks:
                    out += b.named_layers()
                if self.site_downs[i] is not None:
                    out += self.site_downs[i].named_layers()
        else:
            for cell_sites in self.cells:
                for cands in cell_sites:
                    for cand in cands:
                        out += cand.named_layers()
            for red in self.macro_reductions:
                out += red.named_layers()
        for lyr in (self.proj_fc1, self.proj_bn, self.proj_fc2, self.classifier):
            out.append((lyr.name, lyr))
        return out

    def params(self) -> dict[str, Tensor]:
        out = {}
        for prefix, layer in self.named_layers():
            for local, t in layer.params().items():
                out[f"{prefix}.{local}"] = t
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, layer in self.named_layers():
            for local, arr in layer.buffers().items():
                out[f"{prefix}.{local}"] = arr
        return out

    def path_layer_names(self, arch: ArchEncoding) -> list[str]:
        """Layer-name prefixes on the path of `arch` (stem, chosen, shared, heads)."""
        self.validate_arch(arch)
        names = ["stem.conv", "stem.bn"]
        if isinstance(self.space, ChainSpace):
            for i, k in enumerate(arch.choices):
                block = self.site_blocks[i][self._choice_pos[i][k]]
                names += [n for n, _ in block.named_layers()]
                if self.site_downs[i] is not None:
                    names += [n for n, _ in self.site_downs[i].named_layers()]
        else:
            for j, cell_sites in enumerate(self.cells):
                for i, k in enumerate(arch.choices):
                    cand = cell_sites[i][self._choice_pos[i][k]]
                    names += [n for n, _ in cand.named_layers()]
            for red in self.macro_reductions:
                names += [n for n, _ in red.named_layers()]
        names += [self.proj_fc1.name, self.proj_bn.name, self.proj_fc2.name, self.classifier.name]
        return names

    def path_params(self, arch: ArchEncoding) -> dict[str, Tensor]:
        on_path = set(self.path_layer_names(arch))
        out = {}
        for prefix, layer in self.named_layers():
            if prefix in on_path:
                for local, t in layer.params().items():
                    out[f"{prefix}.{local}"] = t
        return out

    # ---- forward ---------------------------------------------------------

    def validate_arch(self, arch: ArchEncoding) -> None:
        radices = self.space.radices()
        if arch.space_id != self.space.space_id:
            raise ContractError(
                f"arch from space '{arch.space_id}' used with '{self.space.space_id}'"
            )
        if len(arch.choices) != len(radices):
            raise ContractError(
                f"arch has {len(arch.choices)} sites, space has {len(radices)}"
            )
        for i, (choice, r) in enumerate(zip(arch.choices, radices)):
            if not 0 <= choice < r:
                raise ContractError(f"site {i}: choice {choice} outside [0, {r})")
        if self.fixed_arch is not None and arch.choices != self.fixed_arch.choices:
            raise ContractError(
                f"fixed-path network built for {self.fixed_arch}, got {arch}"
            )

    def _forward_chain(self, h, arch, fctx):
        for i, k in enumerate(arch.choices):
            block = self.site_blocks[i][self._choice_pos[i][k]]
            main = block.forward_main(h, fctx)
            if self.space.strides[i] > 1:
                red = self.site_downs[i] if self.space.downsample_shared else block.down
                res = red.forward(h, fctx)
            else:
                res = h
            h = tape.relu(tape.add(main, res))
        return h

    def _forward_cell(self, h, arch, fctx):
        space = self.space
        for j, cell_sites in enumerate(self.cells):
            nodes = [h]
            i = 0
            for dst in range(1, space.num_nodes):
                acc = None
                for src in range(dst):
                    cand = cell_sites[i][self._choice_pos[i][arch.choices[i]]]
                    y = cand.forward(nodes[src], fctx)
                    acc = y if acc is None else tape.add(acc, y)
                    i += 1
                nodes.append(acc)
            h = nodes[-1]
            stage_end = (j + 1) % self.cfg.cells_per_stage == 0
            stage = (j + 1) // self.cfg.cells_per_stage - 1
            if stage_end and stage < len(self.macro_reductions):
                h = tape.relu(self.macro_reductions[stage].forward(h, fctx))
        return h

    def forward_path(self, x, ctx: PathContext, head: str = "project", bn_overlay=None):
        """Run a batch through the path chosen by ctx.arch.

        Heads: "project" gives row-normalized (B, D) embeddings through the
        2-layer MLP, "features" the pooled (B, C) backbone output,
        "classify" (B, num_classes) logits. `bn_overlay` supplies
        recalibrated per-path BN statistics for tracked-mode eval.
        """
        if head not in HEADS:
            raise ConfigError(f"unknown head '{head}' (choose from {HEADS})")
        self.validate_arch(ctx.arch)
        fctx = ctx.fctx(bn_overlay=bn_overlay)
        if not isinstance(x, Tensor):
            x = tape.constant(np.ascontiguousarray(x, dtype=np.float32))
        h = tape.relu(self.stem_bn.forward(self.stem_conv.forward(x, fctx), fctx))
        if isinstance(self.space, ChainSpace):
            h = self._forward_chain(h, ctx.arch, fctx)
        else:
            h = self._forward_cell(h, ctx.arch, fctx)
        feats = tape.global_avg_pool(h)
        if head == "features":
            return feats
        if head == "classify":
            return self.classifier.forward(feats, fctx)
        h1 = self.proj_bn.forward(self.proj_fc1.forward(feats, fctx), fctx)
        z = self.proj_fc2.forward(tape.relu(h1), fctx)
        return tape.l2_normalize_rows(z)

    # ---- state -----------------------------------------------------------

    def to_store(self) -> ParameterStore:
        store = ParameterStore()
        for name, t in self.params().items():
            store.set(name, t.data)
        for name, arr in self.buffers().items():
            store.set(name, arr)
        return store

    def load_store(self, store: ParameterStore) -> None:
        for name, t in self.params().items():
            src = store.get(name)
            if src.shape != t.data.shape:
                raise ContractError(f"load: shape {src.shape} != {t.data.shape} for '{name}'")
            t.data[...] = src
        for name, arr in self.buffers().items():
            arr[...] = store.get(name)

    def freeze(self) -> None:
        for t in self.params().values():
            t.requires_grad = False
            t.frozen = True

    def clone(self, frozen: bool = False) -> "Supernet":
        other = Supernet(self.space, self.cfg, self.seed, fixed_arch=self.fixed_arch)
        other.load_store(self.to_store())
        if frozen:
            other.freeze()
        return other


def forward_path(supernet: Supernet, batch, ctx: PathContext, head: str = "project"):
    return supernet.forward_path(batch, ctx, head)


def extract_subnet(supernet: Supernet, arch: ArchEncoding) -> Supernet:
    """Standalone copy of the chosen path; weights independent of the supernet."""
    if supernet.fixed_arch is not None:
        raise ContractError("extract_subnet needs the full supernet, not a fixed path")
    sub = Supernet(supernet.space, supernet.cfg, supernet.seed, fixed_arch=arch)
    src = supernet.to_store()
    dst = ParameterStore()
    for name in {**sub.params(), **sub.buffers()}:
        dst.set(name, src.get(name).copy())
    sub.load_store(dst)
    return sub


def build_subnet(space: Space, arch: ArchEncoding, cfg: SupernetConfig, seed: int) -> Supernet:
    """Freshly initialized standalone network for `arch` (oracle training)."""
    return Supernet(space, cfg, seed, fixed_arch=arch)


def count_params(net: Supernet, arch: ArchEncoding | None = None) -> int:
    params = net.params() if arch is None else net.path_params(arch)
    return sum(t.data.size for t in params.values())


def recalibrate_bn(
    supernet: Supernet, arch: ArchEncoding, calibration_batches
) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Per-path BN statistics: plain average of per-batch moments.

    Returns an overlay {bn layer name: (mean, var)} for eval-time use; no
    buffer on the network is touched, so concurrent candidate evaluations
    stay isolated.
    """
    capture: dict[str, list] = {}
    ctx = PathContext(arch=arch, bn_mode=BnMode.BATCH_STATS, train_flag=False)
    n = 0
    with tape.no_grad():
        for batch in calibration_batches:
            fctx = ctx.fctx(bn_capture=capture)
            x = tape.constant(np.ascontiguousarray(batch, dtype=np.float32))
            h = tape.relu(supernet.stem_bn.forward(supernet.stem_conv.forward(x, fctx), fctx))
            if isinstance(supernet.space, ChainSpace):
                supernet._forward_chain(h, arch, fctx)
            else:
                supernet._forward_cell(h, arch, fctx)
            n += 1
    if n == 0:
        raise ContractError("recalibrate_bn: empty calibration set")
    overlay = {}
    for name, moments in capture.items():
        mean = np.mean([m for m, _ in moments], axis=0).astype(np.float32)
        var = np.mean([v for _, v in moments], axis=0).astype(np.float32)
        overlay[name] = (mean, var)
    return overlay
