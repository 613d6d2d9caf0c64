import logging
from dataclasses import dataclass, field

import numpy as np

from bi_core.bi_binconv import (
    BinConvLayer,
    ConvSpec,
    GradTape,
    RealConvLayer,
    binary_conv_backward,
    binary_conv_forward,
    change_generator_backward,
    change_generator_forward,
)
from bi_core.bi_ops import (
    channel_avg_pool,
    channel_avg_pool_backward,
    check_finite,
    upsample_bilinear,
    upsample_bilinear_backward,
)
from src.bi_errors import ContractError

logger = logging.getLogger("ChangeNet")

THETA = "theta"
ETA = "eta"
PROBE_LAYERS = ("gen1", "gen2", "fused", "aspp")
FEATURE_STRIDE = 4


class ParamSet:
    """
    Именованный набор параметров: путь -> np.ndarray.
    Массивы принадлежат слоям, оптимизатор меняет их на месте.
    θ живут под "theta/", η под "eta/". Порядок обхода - порядок добавления.
    """

    def __init__(self, items=None):
        self._items = {}
        for name, value in (items or {}).items():
            self.add(name, value)

    def add(self, name: str, value: np.ndarray):
        if name in self._items:
            raise ContractError(f"ParamSet: duplicate parameter {name!r}")
        if not (name.startswith(THETA + "/") or name.startswith(ETA + "/")):
            raise ContractError(f"ParamSet: {name!r} is outside the theta/eta namespaces")
        self._items[name] = value

    def merge(self, other: "ParamSet") -> "ParamSet":
        out = ParamSet(self._items)
        for name, value in other.items():
            out.add(name, value)
        return out

    def subset(self, namespace: str) -> "ParamSet":
        return ParamSet({k: v for k, v in self._items.items() if k.startswith(namespace + "/")})

    def names(self) -> list:
        return list(self._items)

    def items(self):
        return self._items.items()

    def snapshot(self) -> dict:
        return {k: v.copy() for k, v in self._items.items()}

    def count(self) -> int:
        return int(sum(v.size for v in self._items.values()))

    def __getitem__(self, name):
        return self._items[name]

    def __contains__(self, name):
        return name in self._items

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)


@dataclass
class PairBatch:
    """Батч пар: x0, x1 - N×3×H×W, y - N×1×H×W (или None на инференсе)."""
    x0: np.ndarray
    x1: np.ndarray
    y: np.ndarray | None = None

    @classmethod
    def from_pairs(cls, pairs, dtype=np.float32) -> "PairBatch":
        if not pairs:
            raise ContractError("PairBatch: empty pair list")
        x0 = np.stack([p.x0 for p in pairs]).astype(dtype, copy=False)
        x1 = np.stack([p.x1 for p in pairs]).astype(dtype, copy=False)
        y = np.stack([p.y for p in pairs]).astype(dtype, copy=False)
        return cls(x0, x1, y)

    def astype(self, dtype) -> "PairBatch":
        y = None if self.y is None else self.y.astype(dtype)
        return PairBatch(self.x0.astype(dtype), self.x1.astype(dtype), y)

    @property
    def size(self) -> int:
        return self.x0.shape[0]


@dataclass
class ZRecords:
    """Промежуточные представления одного прохода, нужные целевой функции и диагностике."""
    gens: list
    backbone: list
    fused: np.ndarray
    probes: dict
    aligned: dict = field(default_factory=dict)


@dataclass
class ZGrads:
    """Градиенты по промежуточным представлениям (слагаемые лосса кроме l_cd)."""
    gens: list | None = None
    aligned: dict = field(default_factory=dict)


class ChangeNet:
    """
    Сиамская сеть обнаружения изменений настольного масштаба.
    stem (real, 3->16, s2) -> stage1 (1-bit, 16->32, s2) -> stage2 (1-bit, 32->64)
    генераторы изменений на обоих уровнях, канальный average pooling до 32 каналов,
    1-битный ASPP (dilation 1/2/4) + 1x1 fuse с шорткатом, real 1x1 head, билинейный апсемплинг.
    """

    def __init__(self, stem: RealConvLayer, stages: list, generators: list, aspp: list,
                 aspp_fuse: BinConvLayer, head: RealConvLayer, fuse_channels: int):
        if len(stages) != len(generators):
            raise ContractError("ChangeNet: one change generator per pyramid stage")
        self.stem = stem
        self.stages = stages
        self.generators = generators
        self.aspp = aspp
        self.aspp_fuse = aspp_fuse
        self.head = head
        self.fuse_channels = fuse_channels

    @classmethod
    def create(cls, rng: np.random.Generator, binarized: bool = True, dtype=np.float32,
               width: int = 16) -> "ChangeNet":
        c1, c2, c3 = width, 2 * width, 4 * width
        fuse = c2
        stem = RealConvLayer.create(f"{THETA}/stem", ConvSpec(3, c1, 3, 3, stride=2, padding=1),
                                    rng, phi="prelu", dtype=dtype)
        stages = [
            BinConvLayer.create(f"{THETA}/stage1", ConvSpec(c1, c2, 3, 3, stride=2, padding=1),
                                rng, phi="prelu", binarized=binarized, dtype=dtype),
            BinConvLayer.create(f"{THETA}/stage2", ConvSpec(c2, c3, 3, 3, stride=1, padding=1),
                                rng, phi="prelu", binarized=binarized, dtype=dtype),
        ]
        generators = [
            BinConvLayer.create(f"{THETA}/gen1", ConvSpec(c2, c2, 3, 3, padding=1),
                                rng, phi="prelu", binarized=binarized, dtype=dtype),
            BinConvLayer.create(f"{THETA}/gen2", ConvSpec(c3, c3, 3, 3, padding=1),
                                rng, phi="prelu", binarized=binarized, dtype=dtype),
        ]
        aspp = [
            BinConvLayer.create(f"{THETA}/aspp_d{d}", ConvSpec(fuse, fuse, 3, 3, padding=d, dilation=d),
                                rng, phi="prelu", binarized=binarized, dtype=dtype)
            for d in (1, 2, 4)
        ]
        aspp_fuse = BinConvLayer.create(f"{THETA}/aspp_fuse", ConvSpec(3 * fuse, fuse, 1, 1),
                                        rng, phi="prelu", binarized=binarized, dtype=dtype)
        head = RealConvLayer.create(f"{THETA}/head", ConvSpec(fuse, 1, 1, 1), rng, dtype=dtype)
        return cls(stem, stages, generators, aspp, aspp_fuse, head, fuse)

    def layers(self) -> list:
        return [self.stem, *self.stages, *self.generators, *self.aspp, self.aspp_fuse, self.head]

    def binary_layers(self) -> list:
        return [layer for layer in self.layers() if isinstance(layer, BinConvLayer)]

    def params(self) -> ParamSet:
        out = ParamSet()
        for layer in self.layers():
            for name, value in layer.params().items():
                out.add(name, value)
        return out

    def cast(self, dtype):
        for layer in self.layers():
            layer.cast(dtype)

    @property
    def binarized(self) -> bool:
        return all(layer.binarized for layer in self.binary_layers())

    def set_binarized(self, flag: bool):
        for layer in self.binary_layers():
            layer.binarized = flag

    @property
    def dtype(self):
        return self.head.weight.dtype

    def calibrate_thresholds(self, x0: np.ndarray, x1: np.ndarray):
        """
        Пороги τ генераторов := поканальное среднее max−min на калибровочном батче.
        Без этого вход генератора (>= 0) бинаризуется в сплошные +1.
        """
        pyr0, pyr1 = siamese_encode(x0, x1, self)
        for gen, f0, f1 in zip(self.generators, pyr0, pyr1):
            d = np.maximum(f0, f1) - np.minimum(f0, f1)
            gen.act_shift[...] = d.mean(axis=(0, 2, 3))
            logger.info(f"{gen.name}: act_shift calibrated, mean {float(gen.act_shift.mean()):.4f}")

    def predict(self, x0: np.ndarray, x1: np.ndarray) -> np.ndarray:
        """Инференс: только θ, без ленты."""
        logits, _ = forward_full(PairBatch(x0, x1), self)
        return logits


def _check_pair_input(x0: np.ndarray, x1: np.ndarray):
    if x0.shape != x1.shape:
        raise ContractError(f"pair images differ in shape: {x0.shape} vs {x1.shape}")
    if x0.ndim != 4 or x0.shape[1] != 3:
        raise ContractError(f"expected N x 3 x H x W images, got {x0.shape}")
    h, w = x0.shape[2:]
    if h % FEATURE_STRIDE or w % FEATURE_STRIDE:
        raise ContractError(f"image size {h}x{w} is not a multiple of {FEATURE_STRIDE}")
    check_finite(x0, "x0")
    check_finite(x1, "x1")


def _encode_branch(x: np.ndarray, net: ChangeNet, tape: GradTape | None) -> list:
    f = net.stem.forward(x, tape)
    pyramid = []
    for stage in net.stages:
        f = binary_conv_forward(f, stage, tape)
        pyramid.append(f)
    return pyramid


def _encode_branch_backward(grad_pyramid: list, net: ChangeNet, tape: GradTape, grads: dict):
    carry = None
    for stage, g_level in zip(reversed(net.stages), reversed(grad_pyramid)):
        g = g_level if carry is None else g_level + carry
        sg = binary_conv_backward(g, stage, tape)
        sg.accumulate_into(grads, stage)
        carry = sg.grad_a
    net.stem.backward(carry, tape, grads)


def siamese_encode(x0: np.ndarray, x1: np.ndarray, net: ChangeNet, tape: GradTape | None = None):
    """Две пирамиды признаков на одних и тех же весах; ветки не смешиваются."""
    _check_pair_input(x0, x1)
    return _encode_branch(x0, net, tape), _encode_branch(x1, net, tape)


def forward_full(pair: PairBatch, net: ChangeNet, aux=None, tape: GradTape | None = None):
    """
    Полный проход: логиты N×1×H×W и записи Z.
    aux=None - инференсный граф, η не затрагиваются.
    """
    x0, x1 = pair.x0, pair.x1
    pyr0, pyr1 = siamese_encode(x0, x1, net, tape)
    gens = [change_generator_forward(f0, f1, gen, tape)
            for gen, f0, f1 in zip(net.generators, pyr0, pyr1)]
    fused = channel_avg_pool(np.concatenate(gens, axis=1), net.fuse_channels)
    branches = [binary_conv_forward(fused, layer, tape) for layer in net.aspp]
    s = binary_conv_forward(np.concatenate(branches, axis=1), net.aspp_fuse, tape) + fused
    h = net.head.forward(s, tape)
    logits = upsample_bilinear(h, x0.shape[2], x0.shape[3])
    if tape is not None:
        tape.push(f"{THETA}/upsample", {"hw": h.shape[2:]})

    records = ZRecords(
        gens=gens,
        backbone=[pyr0[-1], pyr1[-1]],
        fused=fused,
        probes={"gen1": gens[0], "gen2": gens[1], "fused": fused, "aspp": s},
    )
    if aux is not None:
        records.aligned = aux.forward_sites(records, x0.shape[2:], tape)
    return logits, records


def backward_full(grad_logits: np.ndarray, net: ChangeNet, aux, tape: GradTape,
                  grad_z: ZGrads | None = None) -> dict:
    """
    Обратный проход к forward_full. Возвращает градиенты для всех путей θ (и η, если aux задан).
    Параметры сиамских веток накапливают вклад обеих веток.
    """
    grads = {}
    n_gen = len(net.generators)
    feature_grads = {}
    if aux is not None:
        feature_grads = aux.backward_sites(grad_z.aligned if grad_z else {}, tape, grads)

    hw = tape.pop(f"{THETA}/upsample")["hw"]
    g_h = upsample_bilinear_backward(grad_logits, hw[0], hw[1])
    g_s = net.head.backward(g_h, tape, grads)

    fg = binary_conv_backward(g_s, net.aspp_fuse, tape)
    fg.accumulate_into(grads, net.aspp_fuse)
    g_branches = np.split(fg.grad_a, len(net.aspp), axis=1)
    g_fused = g_s.copy()
    for layer, g_b in zip(reversed(net.aspp), reversed(g_branches)):
        bg = binary_conv_backward(g_b, layer, tape)
        bg.accumulate_into(grads, layer)
        g_fused = g_fused + bg.grad_a

    gen_channels = [gen.spec.out_channels for gen in net.generators]
    g_cat = channel_avg_pool_backward(g_fused, sum(gen_channels))
    g_gens = np.split(g_cat, np.cumsum(gen_channels)[:-1], axis=1)
    for i in range(n_gen):
        if grad_z is not None and grad_z.gens is not None and grad_z.gens[i] is not None:
            g_gens[i] = g_gens[i] + grad_z.gens[i]
        site = f"gen{i + 1}"
        if site in feature_grads:
            g_gens[i] = g_gens[i] + feature_grads[site][0]

    g_pyr0 = [None] * n_gen
    g_pyr1 = [None] * n_gen
    for i in reversed(range(n_gen)):
        gen = net.generators[i]
        g0, g1, gg = change_generator_backward(g_gens[i], gen, tape)
        gg.accumulate_into(grads, gen)
        g_pyr0[i], g_pyr1[i] = g0, g1

    if "backbone" in feature_grads:
        g_pyr0[-1] = g_pyr0[-1] + feature_grads["backbone"][0]
        g_pyr1[-1] = g_pyr1[-1] + feature_grads["backbone"][1]

    _encode_branch_backward(g_pyr1, net, tape, grads)
    _encode_branch_backward(g_pyr0, net, tape, grads)
    return grads
