"""Make small neural networks cheaper to prove.

The pieces: fixed-point quantization, unstructured pruning, change-of-basis
teleportation to shrink activation ranges, PLONKish table synthesis with
zero-weight elimination, and a hash-commitment prover/verifier.
"""

from .model import (
    FloatModel,
    QuantizedModel,
    Linear,
    Activation,
    ResidualAdd,
    quantize,
    dequantize,
    quantize_input,
    infer,
    forward,
    calibrate,
    read_model,
    write_model,
)
from .ranges import RangeReport, activation_range_stats
from .pruner import SparsityPlan, magnitude_prune, rd_allocate, cap_prune, apply_plan
from .teleport import CoBAssignment, TeleportConfig, assign_cob_groups, optimize_cob, teleport_apply
from .circuit import (
    CircuitTable,
    LookupTable,
    SplitPlan,
    build_lookup_tables,
    synthesize_circuit,
    split_circuit,
    pad_dummy,
    assign_witness,
)
from .transcript import keygen, prove, verify, verify_chain

__version__ = "0.1.0"
