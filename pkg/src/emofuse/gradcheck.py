"""Finite-difference verification suite over every layer and the full
fusion graph, at a fixed tiny configuration (alignment width 4, four conv
channels, reduction 2, all three modalities)."""

from __future__ import annotations

from typing import Dict

import numpy as np

from .autodiff import GradCheckReport, Tensor, finite_diff_gradcheck, tsum
from .layers import SEParams, conv2d, global_max_pool, linear, se_excite, se_scale, se_squeeze, softmax
from .model import FafModel, ModelConfig, build_logits
from .training import softmax_cross_entropy

TINY_CONFIG = dict(
    input_dims={"face": 8, "body": 8, "text": 6},
    d_align=4,
    conv_out_channels=4,
    reduction_ratio=2,
)

TOLERANCE = 1e-4


def run_suite(eps: float = 1e-4, seed: int = 0) -> Dict[str, GradCheckReport]:
    """Gradient-check each layer and the composed graph; keys name the case."""
    rs = np.random.RandomState(seed)
    suite: Dict[str, GradCheckReport] = {}

    x_lin = rs.randn(3, 4)
    suite["linear"] = finite_diff_gradcheck(
        lambda p: tsum(linear(Tensor(x_lin), p["w"], p["b"])),
        {"w": rs.randn(5, 4), "b": rs.randn(5)},
        eps,
    )

    x_conv = rs.randn(2, 1, 3, 6)
    suite["conv2d.kernels"] = finite_diff_gradcheck(
        lambda p: tsum(conv2d(Tensor(x_conv), p["k"], stride=1, pad=1)),
        {"k": rs.randn(4, 1, 3, 3)},
        eps,
    )
    k_conv = rs.randn(2, 1, 2, 2)
    suite["conv2d.input"] = finite_diff_gradcheck(
        lambda p: tsum(conv2d(p["x"], Tensor(k_conv), stride=2, pad=1)),
        {"x": rs.randn(2, 1, 4, 4)},
        eps,
    )

    suite["se_squeeze"] = finite_diff_gradcheck(
        lambda p: tsum(se_squeeze(p["x"])), {"x": rs.randn(2, 4, 3, 4)}, eps
    )
    x_se = rs.randn(2, 4, 3, 4)
    suite["se_excite_scale"] = finite_diff_gradcheck(
        lambda p: tsum(
            se_scale(Tensor(x_se), se_excite(se_squeeze(Tensor(x_se)), SEParams(p["w1"], p["w2"], 2)))
        ),
        {"w1": rs.randn(2, 4), "w2": rs.randn(4, 2)},
        eps,
    )

    # unique spatial maxima so the max routing is differentiable at the point
    x_pool = rs.randn(2, 3, 3, 3)
    suite["global_max_pool"] = finite_diff_gradcheck(
        lambda p: tsum(global_max_pool(p["x"])), {"x": x_pool}, min(eps, 1e-5)
    )

    x_head = rs.randn(3, 4)
    weights = rs.randn(3, 5)
    suite["softmax_head"] = finite_diff_gradcheck(
        lambda p: tsum(softmax(linear(Tensor(x_head), p["w"], p["b"])) * Tensor(weights)),
        {"w": rs.randn(5, 4), "b": rs.randn(5)},
        eps,
    )

    logits = rs.randn(4, 5)
    suite["softmax_cross_entropy"] = finite_diff_gradcheck(
        lambda p: softmax_cross_entropy(p["z"], np.array([0, 2, 4, 1])),
        {"z": logits},
        eps,
    )

    config = ModelConfig(**TINY_CONFIG)
    model = FafModel.init(config, seed=seed)
    feats = {
        m: rs.randn(2, config.input_dims[m]) for m in config.enabled_modalities
    }
    labels = np.array([0, 3])
    suite["full_graph"] = finite_diff_gradcheck(
        lambda p: softmax_cross_entropy(build_logits(feats, p, config, gate_active=True), labels),
        model.params,
        eps,
    )
    return suite


def worst_error(suite: Dict[str, GradCheckReport]) -> float:
    return max(report.max_relative_error for report in suite.values())
