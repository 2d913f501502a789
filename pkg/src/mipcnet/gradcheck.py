"""Central finite-difference gradient checks for every differentiable block.

The analytic gradient comes from backpropagation; the reference gradient is
computed independently by perturbing each input element by +/-h and
re-running the forward pass, so the two routes share no code beyond the
forward itself.
"""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass

import torch

from . import attention, losses, network

FD_STEP = 1e-5
REL_TOL = 1e-4


def finite_difference_gradient(
    fn: Callable[[torch.Tensor], torch.Tensor],
    x: torch.Tensor,
    step: float = FD_STEP,
) -> torch.Tensor:
    """Central-difference gradient of a scalar-valued fn, element by element."""
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            f_plus = fn(x).item()
            flat[i] = orig - step
            f_minus = fn(x).item()
            flat[i] = orig
            gflat[i] = (f_plus - f_minus) / (2.0 * step)
    return grad


def max_relative_error(analytic: torch.Tensor, reference: torch.Tensor, floor: float = 1e-6) -> float:
    """Largest deviation relative to the gradient scale:
    max|a - r| / max(max|a|, max|r|, floor).

    Normalising by the gradient's magnitude keeps the check meaningful at
    ReLU subgradient points, where a per-element ratio is ill-posed for
    elements whose true gradient is near zero.
    """
    diff = float((analytic - reference).abs().max())
    scale = max(float(analytic.abs().max()), float(reference.abs().max()), floor)
    return diff / scale


def check_gradient(
    fn: Callable[[torch.Tensor], torch.Tensor],
    x: torch.Tensor,
    step: float = FD_STEP,
) -> float:
    """Max relative error between backprop and finite-difference gradients."""
    x = x.detach().clone().requires_grad_(True)
    fn(x).backward()
    analytic = x.grad.detach().clone()
    reference = finite_difference_gradient(fn, x.detach().clone(), step)
    return max_relative_error(analytic, reference)


def _randomize_parameters(module: torch.nn.Module, gen: torch.Generator, scale: float = 0.2) -> None:
    # Fresh-built blocks are near-identities (zero gamma, zero biases);
    # random parameters make the check exercise every path.
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * scale)


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= REL_TOL


def _block_cases(gen: torch.Generator) -> list[tuple[str, torch.nn.Module]]:
    c = 4
    return [
        ("position_attention", attention.PositionAttention(c)),
        ("channel_attention", attention.ChannelAttention()),
        ("channel_summary", attention.ChannelSummary(c)),
        ("position_summary", attention.PositionSummary()),
        ("residual_tail", attention.ResidualTail(c)),
        ("mipc_block", attention.MipcBlock(c)),
        ("mipc_block_swapped", attention.MipcBlock(c, variant=attention.ALL_VARIANTS[-1])),
        ("pc_block", attention.PcBlock(c)),
        ("da_block", attention.DaBlock(c)),
    ]


def run_block_checks(seed: int = 0, step: float = FD_STEP) -> list[GradCheckResult]:
    gen = torch.Generator().manual_seed(seed)
    results = []
    for name, block in _block_cases(gen):
        block = block.double().eval()
        _randomize_parameters(block, gen)
        x = torch.randn((1, 4, 6, 6), generator=gen, dtype=torch.float64)
        err = check_gradient(lambda t, b=block: b(t).sum(), x, step)
        results.append(GradCheckResult(name, err))
    return results


def run_model_check(seed: int = 0, step: float = FD_STEP) -> GradCheckResult:
    cfg = network.micro_config()
    model = network.build_model(cfg, seed=seed).double().eval()
    gen = torch.Generator().manual_seed(seed + 1)
    _randomize_parameters(model, gen, scale=0.1)
    x = torch.randn((1, cfg.in_channels, cfg.input_size, cfg.input_size),
                    generator=gen, dtype=torch.float64)
    err = check_gradient(lambda t: model(t).sum(), x, step)
    return GradCheckResult("model_end_to_end", err)


def run_loss_checks(seed: int = 0, step: float = FD_STEP) -> list[GradCheckResult]:
    gen = torch.Generator().manual_seed(seed)
    b, k, h, w = 2, 3, 4, 4
    gt = torch.randint(0, k, (b, h, w), generator=gen)
    onehot = torch.nn.functional.one_hot(gt, k).permute(0, 3, 1, 2).double()

    def dice_fn(logits):
        return losses.soft_dice_loss(torch.softmax(logits, dim=1), onehot)

    logits = torch.randn((b, k, h, w), generator=gen, dtype=torch.float64)
    dice_err = check_gradient(dice_fn, logits, step)
    comb_err = check_gradient(lambda t: losses.combined_loss(t, gt), logits.clone(), step)
    return [
        GradCheckResult("soft_dice_loss", dice_err),
        GradCheckResult("combined_loss", comb_err),
    ]


def run_full_suite(seed: int = 0, step: float = FD_STEP) -> list[GradCheckResult]:
    """All block, end-to-end model, and loss gradient checks (64-bit)."""
    results = run_block_checks(seed, step)
    results.append(run_model_check(seed, step))
    results.extend(run_loss_checks(seed, step))
    return results
