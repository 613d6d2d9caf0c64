import logging
from dataclasses import dataclass

import numpy as np

from bi_core.bi_binconv import ConvSpec, GradTape, RealConvLayer
from bi_core.bi_model import ETA, FEATURE_STRIDE, ParamSet, ZRecords
from bi_core.bi_ops import upsample_bilinear, upsample_bilinear_backward
from src.bi_errors import ContractError

logger = logging.getLogger("AuxObjective")

BRANCH_WIDTHS = (8, 16, 32, 64)
ALIGNED_CHANNELS = 3
PLACEMENTS = ("none", "backbone", "generator", "both")


@dataclass
class AlignedFeatures:
    """Выровненные признаки генератора и их разбиение маской изменений."""
    z_aligned: np.ndarray
    z_in: np.ndarray
    z_n: np.ndarray


class AuxModule:
    """
    Вспомогательный модуль σ(·, η), только для обучения.
    4 параллельные ветки (1x1 conv + ReLU, 2 слоя, ширины 8/16/32/64) -> concat ->
    3x3 conv в 3 канала -> билинейно до размера входного изображения.
    """

    def __init__(self, name: str, in_channels: int, branches: list, out_conv: RealConvLayer,
                 scale: int = FEATURE_STRIDE):
        self.name = name
        self.in_channels = in_channels
        self.branches = branches
        self.out_conv = out_conv
        self.scale = scale

    @classmethod
    def create(cls, name: str, in_channels: int, rng: np.random.Generator,
               widths=BRANCH_WIDTHS, scale: int = FEATURE_STRIDE, dtype=np.float32) -> "AuxModule":
        branches = []
        for i, width in enumerate(widths):
            branches.append((
                RealConvLayer.create(f"{name}/branch{i}_a", ConvSpec(in_channels, width, 1, 1),
                                     rng, phi="relu", dtype=dtype),
                RealConvLayer.create(f"{name}/branch{i}_b", ConvSpec(width, width, 1, 1),
                                     rng, phi="relu", dtype=dtype),
            ))
        out_conv = RealConvLayer.create(f"{name}/out_conv",
                                        ConvSpec(sum(widths), ALIGNED_CHANNELS, 3, 3, padding=1),
                                        rng, dtype=dtype)
        return cls(name, in_channels, branches, out_conv, scale)

    def layers(self) -> list:
        out = []
        for first, second in self.branches:
            out.extend((first, second))
        out.append(self.out_conv)
        return out

    def params(self) -> dict:
        out = {}
        for layer in self.layers():
            out.update(layer.params())
        return out

    def cast(self, dtype):
        for layer in self.layers():
            layer.cast(dtype)


def aux_align(z: np.ndarray, aux: AuxModule, tape: GradTape | None = None, out_hw=None) -> np.ndarray:
    """Выравнивание признака Z к размеру входа: N×3×H×W. Дифференцируемо по z."""
    if z.ndim != 4 or z.shape[1] != aux.in_channels:
        raise ContractError(f"{aux.name}: expected N x {aux.in_channels} x h x w, got {z.shape}")
    target = (z.shape[2] * aux.scale, z.shape[3] * aux.scale)
    if out_hw is not None and tuple(out_hw) != target:
        raise ContractError(f"{aux.name}: feature {z.shape[2:]} does not map to image {tuple(out_hw)} "
                            f"at scale {aux.scale}")
    outs = []
    for first, second in aux.branches:
        outs.append(second.forward(first.forward(z, tape), tape))
    h = aux.out_conv.forward(np.concatenate(outs, axis=1), tape)
    up = upsample_bilinear(h, target[0], target[1])
    if tape is not None:
        tape.push(f"{aux.name}:up", {"hw": h.shape[2:], "out_shape": up.shape, "dtype": up.dtype})
    return up


def aux_align_backward(grad: np.ndarray, aux: AuxModule, tape: GradTape, grads: dict) -> np.ndarray:
    hw = tape.pop(f"{aux.name}:up")["hw"]
    g_h = upsample_bilinear_backward(grad, hw[0], hw[1])
    g_cat = aux.out_conv.backward(g_h, tape, grads)
    widths = [second.spec.out_channels for _, second in aux.branches]
    parts = np.split(g_cat, np.cumsum(widths)[:-1], axis=1)
    grad_z = None
    for (first, second), g in zip(reversed(aux.branches), reversed(parts)):
        g = first.backward(second.backward(g, tape, grads), tape, grads)
        grad_z = g if grad_z is None else grad_z + g
    return grad_z


def _check_mask(y: np.ndarray, like: np.ndarray):
    if y.ndim != 4 or y.shape[1] != 1 or y.shape[0] != like.shape[0] or y.shape[2:] != like.shape[2:]:
        raise ContractError(f"mask shape {y.shape} does not broadcast over {like.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ContractError("mask must be binary {0, 1}")


def split_by_mask(z_aligned: np.ndarray, y: np.ndarray):
    """(z ⊙ y, z ⊙ (1 − y)); сумма частей равна z."""
    _check_mask(y, z_aligned)
    z_in = z_aligned * y
    # вычитание, а не z * (1 - y): сумма частей совпадает с z побитно
    z_n = z_aligned - z_in
    return z_in, z_n


def delta_x(x0: np.ndarray, x1: np.ndarray) -> np.ndarray:
    if x0.shape != x1.shape:
        raise ContractError(f"delta_x: shape mismatch {x0.shape} vs {x1.shape}")
    return np.abs(x0 - x1)


def delta_x_in(dx: np.ndarray, y: np.ndarray) -> np.ndarray:
    _check_mask(y, dx)
    return dx * y


def aligned_features(z_aligned: np.ndarray, y: np.ndarray) -> AlignedFeatures:
    z_in, z_n = split_by_mask(z_aligned, y)
    return AlignedFeatures(z_aligned, z_in, z_n)


def _mean_abs(x: np.ndarray) -> float:
    return float(np.abs(x).mean())


def psi_terms(aligned_gen: AlignedFeatures | None, aligned_backbone, x, dx_in):
    """
    (l_noise, l_interest, l_recon), все - средние L1.
    l_noise = |z_n|, l_interest = |z_in − ΔX_in|, l_recon = |z_backbone − X|.
    None на месте признаков даёт 0 для соответствующих слагаемых.
    """
    l_noise = l_interest = l_recon = 0.0
    if aligned_gen is not None:
        if aligned_gen.z_in.shape != dx_in.shape:
            raise ContractError(f"psi_terms: {aligned_gen.z_in.shape} vs dx_in {dx_in.shape}")
        l_noise = _mean_abs(aligned_gen.z_n)
        l_interest = _mean_abs(aligned_gen.z_in - dx_in)
    if aligned_backbone is not None:
        if aligned_backbone.shape != x.shape:
            raise ContractError(f"psi_terms: {aligned_backbone.shape} vs x {x.shape}")
        l_recon = _mean_abs(aligned_backbone - x)
    return l_noise, l_interest, l_recon


def psi_grads(aligned_gen: AlignedFeatures | None, y, aligned_backbone, x, dx_in):
    """Градиенты слагаемых Ψ: (d(l_noise + l_interest)/dz_gen, d l_recon/dz_backbone)."""
    g_gen = g_backbone = None
    if aligned_gen is not None:
        count = aligned_gen.z_aligned.size
        g_gen = (np.sign(aligned_gen.z_n) * (1 - y) + np.sign(aligned_gen.z_in - dx_in) * y) / count
    if aligned_backbone is not None:
        g_backbone = np.sign(aligned_backbone - x) / aligned_backbone.size
    return g_gen, g_backbone


def placement_sites(placement: str, n_generators: int = 2) -> list:
    if placement not in PLACEMENTS:
        raise ContractError(f"unknown aux placement {placement!r}, expected one of {PLACEMENTS}")
    sites = []
    if placement in ("generator", "both"):
        sites.extend(f"gen{i + 1}" for i in range(n_generators))
    if placement in ("backbone", "both"):
        sites.append("backbone")
    return sites


class AuxBank:
    """
    По одному AuxModule на точку подключения (генераторы каждого уровня и backbone).
    Модуль backbone общий для обеих сиамских веток.
    """

    def __init__(self, modules: dict, placement: str):
        self.modules = modules
        self.placement = placement

    @classmethod
    def create(cls, rng: np.random.Generator, placement: str = "both", gen_channels=(32, 64),
               backbone_channels: int = 64, dtype=np.float32) -> "AuxBank":
        modules = {}
        for site in placement_sites(placement, len(gen_channels)):
            if site == "backbone":
                channels = backbone_channels
            else:
                channels = gen_channels[int(site[3:]) - 1]
            modules[site] = AuxModule.create(f"{ETA}/{site}", channels, rng, dtype=dtype)
        return cls(modules, placement)

    @classmethod
    def for_net(cls, net, rng: np.random.Generator, placement: str = "both") -> "AuxBank":
        return cls.create(rng, placement,
                          gen_channels=tuple(g.spec.out_channels for g in net.generators),
                          backbone_channels=net.stages[-1].spec.out_channels,
                          dtype=net.dtype)

    def params(self) -> ParamSet:
        out = ParamSet()
        for module in self.modules.values():
            for name, value in module.params().items():
                out.add(name, value)
        return out

    def cast(self, dtype):
        for module in self.modules.values():
            module.cast(dtype)

    def forward_sites(self, records: ZRecords, out_hw, tape: GradTape | None = None) -> dict:
        """site -> список выровненных тензоров (для backbone - по ветке)."""
        aligned = {}
        for site, module in self.modules.items():
            if site == "backbone":
                aligned[site] = [aux_align(z, module, tape, out_hw) for z in records.backbone]
            else:
                aligned[site] = [aux_align(records.gens[int(site[3:]) - 1], module, tape, out_hw)]
        return aligned

    def backward_sites(self, grad_aligned: dict, tape: GradTape, grads: dict) -> dict:
        """Обратный проход по точкам подключения в обратном порядке; возвращает site -> grad по z."""
        out = {}
        for site in reversed(list(self.modules)):
            module = self.modules[site]
            site_grads = grad_aligned.get(site)
            n_inputs = 2 if site == "backbone" else 1
            result = [None] * n_inputs
            for i in reversed(range(n_inputs)):
                g = site_grads[i] if site_grads is not None else None
                if g is None:
                    # слагаемое выключено (β₂ = 0): запись всё равно снимается с ленты
                    saved = tape.peek(f"{module.name}:up")
                    g = np.zeros(saved["out_shape"], dtype=saved["dtype"])
                result[i] = aux_align_backward(g, module, tape, grads)
            out[site] = result
        return out
