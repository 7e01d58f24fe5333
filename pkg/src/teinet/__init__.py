"""Motion-enhancement and temporal-interaction modules for video networks, on a small numpy autodiff core."""
from .backbone import NetworkSpec, build_network, evaluate, forward_logits, train
from .data import SyntheticVideoConfig, generate_dataset, load_dataset, save_dataset, uniform_sample_frames
from .errors import ContractError, FormatError, NumericalDivergence, ShapeError, TeiError
from .temporal import (
    MemModule,
    SeModule,
    ShiftSpec,
    TimModule,
    mem_forward,
    se_forward,
    tei_forward,
    tim_forward,
    tim_from_shift_spec,
    tsm_forward,
)

__version__ = "0.1.0"
