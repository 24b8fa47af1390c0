from .policies import (ARCHITECTURES, DEFAULT_SPECS, AdamState, ParameterStore, PolicySpec,
                       adam_step, forward, forward_backward, loss_only, masked_logits, predict)

__all__ = [
    "ARCHITECTURES", "DEFAULT_SPECS", "AdamState", "ParameterStore", "PolicySpec",
    "adam_step", "forward", "forward_backward", "loss_only", "masked_logits", "predict",
]
