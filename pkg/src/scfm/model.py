"""The SCFM parameter bundle: recognition net, decoder and GMM prior."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .autodiff import Tensor
from .networks import N_TIME_FEATURES, Decoder, Mlp, MlpSpec, RecognitionNet, mlp_flops
from .prior import GmmPrior


@dataclass
class ScfmModel:
    net: RecognitionNet
    decoder: Decoder
    prior: GmmPrior

    @property
    def d_z(self) -> int:
        return self.net.d_z

    @property
    def d_eps(self) -> int:
        return self.net.d_eps

    @property
    def D(self) -> int:
        return self.net.D

    @property
    def K(self) -> int:
        return self.prior.K

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        out.update(self.net.trunk.named_parameters("trunk"))
        out.update(self.net.var_head.named_parameters("var"))
        out.update(self.decoder.mlp.named_parameters("dec"))
        out.update(self.prior.named_parameters())
        return out

    def with_parameters(self, params: dict[str, Tensor]) -> "ScfmModel":
        """Copy of the model whose tensors are taken from ``params`` by name."""

        def rebuild(mlp: Mlp, prefix: str) -> Mlp:
            n = len(mlp.weights)
            return Mlp(mlp.spec,
                       [params[f"{prefix}.W{i}"] for i in range(n)],
                       [params[f"{prefix}.b{i}"] for i in range(n)])

        net = RecognitionNet(rebuild(self.net.trunk, "trunk"), rebuild(self.net.var_head, "var"),
                             self.net.d_z, self.net.d_eps, self.net.skip)
        dec = replace(self.decoder, mlp=rebuild(self.decoder.mlp, "dec"))
        prior = GmmPrior(params["prior.logits"], params["prior.means"], params["prior.log_scales"])
        return ScfmModel(net, dec, prior)

    def per_eval_flops(self) -> int:
        return mlp_flops(self.net.trunk.spec.layer_widths)


def build_model(d_z: int, d_eps: int, K: int, rng: np.random.Generator,
                hidden: Sequence[int] = (128, 128, 128), var_hidden: Sequence[int] = (32,),
                dec_hidden: Sequence[int] = (64, 64), activation: str = "tanh",
                final_layer_zero_init: bool = True, mean_skip: bool = True) -> ScfmModel:
    D = d_z + d_eps
    hidden = tuple(hidden)
    trunk = Mlp.init(MlpSpec((D + N_TIME_FEATURES, *hidden, D), activation,
                             final_layer_zero_init), rng)
    var_head = Mlp.init(MlpSpec((hidden[-1], *tuple(var_hidden), d_z), activation,
                                final_layer_zero_init), rng)
    dec = Mlp.init(MlpSpec((d_z, *tuple(dec_hidden), D), activation, final_layer_zero_init), rng)
    prior = GmmPrior.init(K, d_z, rng)
    return ScfmModel(RecognitionNet(trunk, var_head, d_z, d_eps, mean_skip), Decoder(dec), prior)


def per_eval_flops(model: ScfmModel) -> int:
    return model.per_eval_flops()
