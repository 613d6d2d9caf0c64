import logging
from typing import NamedTuple

from bi_core.bi_binconv import BinConvLayer, RealConvLayer
from bi_core.bi_model import ChangeNet

logger = logging.getLogger("ModelStats")

BINARY_PARAM_DIVISOR = 32
BINARY_OPS_DIVISOR = 64


class LayerStats(NamedTuple):
    name: str
    binary: bool
    params: float
    macs: int
    ops: float


class ModelStats(NamedTuple):
    params_m: float
    ops_g: float


def layer_stats(layer, out_h: int, out_w: int) -> LayerStats:
    """
    Один слой: 1-битные веса идут с весом 1/32, 1-битные MAC - 1/64 операции,
    полноточные MAC считаются как 2 FLOP. Поканальные α, β, τ, наклоны - полноточные параметры.
    """
    spec = layer.spec
    macs = spec.out_channels * spec.fan_in * out_h * out_w
    if isinstance(layer, BinConvLayer):
        per_channel = layer.alpha.size + layer.beta_bias.size + layer.act_shift.size
        if layer.slope is not None:
            per_channel += layer.slope.size
        params = layer.latent_w.size / BINARY_PARAM_DIVISOR + per_channel
        return LayerStats(layer.name, True, params, macs, macs / BINARY_OPS_DIVISOR)
    if isinstance(layer, RealConvLayer):
        params = sum(v.size for v in layer.params().values())
        return LayerStats(layer.name, False, float(params), macs, 2.0 * macs)
    raise TypeError(f"unsupported layer {type(layer).__name__}")


def layer_geometry(net: ChangeNet, height: int, width: int) -> list:
    """(layer, out_h, out_w) для каждого слоя сети на входе height × width."""
    rows = []
    h, w = net.stem.spec.out_hw(height, width)
    rows.append((net.stem, h, w))
    level_hw = []
    for stage in net.stages:
        h, w = stage.spec.out_hw(h, w)
        rows.append((stage, h, w))
        level_hw.append((h, w))
    for gen, (gh, gw) in zip(net.generators, level_hw):
        rows.append((gen, *gen.spec.out_hw(gh, gw)))
    fh, fw = rows[-1][1], rows[-1][2]
    for layer in net.aspp:
        rows.append((layer, *layer.spec.out_hw(fh, fw)))
    rows.append((net.aspp_fuse, *net.aspp_fuse.spec.out_hw(fh, fw)))
    rows.append((net.head, *net.head.spec.out_hw(fh, fw)))
    return rows


def stats_table(net: ChangeNet, image_size: int = 64) -> list:
    return [layer_stats(layer, h, w) for layer, h, w in layer_geometry(net, image_size, image_size)]


def model_stats(net: ChangeNet, image_size: int = 64) -> ModelStats:
    """(параметры в миллионах, OPs в миллиардах); вспомогательные модули не входят."""
    table = stats_table(net, image_size)
    params = sum(row.params for row in table)
    ops = sum(row.ops for row in table)
    return ModelStats(params / 1e6, ops / 1e9)
