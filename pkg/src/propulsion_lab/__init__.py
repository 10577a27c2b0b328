"""Desk-scale lab for Propulsion fine-tuning, PEFT baselines and NTK diagnostics."""

from .errors import (
    AttachmentError,
    ConfigError,
    ContractError,
    DataError,
    DimensionError,
    DivergedError,
    DomainError,
    LabError,
    ResourceLimitError,
    SpecError,
    UnsupportedDegreeError,
)
from .model import AttachmentSite, FrozenModel, ModelSpec, build, enumerate_sites, site_group
from .peft import (
    AdapterSet,
    LoRAAdapter,
    MultiPropulsionAdapter,
    ParamBudget,
    PropulsionAdapter,
    count_trainable,
    lora_apply,
    make_adapter_set,
    materialize_effective_weight,
    multi_propulsion_apply,
    propulsion_apply,
)
from .tensor import Parameter, Tensor, backward, no_grad
from .trainer import TrainConfig, train

__version__ = "0.1.0"
