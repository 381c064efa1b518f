"""Safe-error-attack model-extraction workbench for 8-bit quantized networks.

Pipeline: train a float victim, quantize it to the powers-of-two int8 scheme,
craft attack inputs (random or GA), run the safe-error fault campaign, grow
the recovered bits with LSBL, then train a constrained substitute and score
it on accuracy / fidelity / accuracy-under-attack. A randomized-scaling
defense and its expectation attack close the loop.
"""

from .crafting import (
    Certainty,
    GAConfig,
    Strategy,
    TargetScores,
    build_attack_set,
    classify_prediction,
    ga_cost,
    ga_evolve,
    gen_target_scores,
    random_inputs,
)
from .defense import (
    DefenseConfig,
    accuracy,
    aua,
    expectation_delta,
    fidelity,
    randomized_infer,
    sea_under_defense,
)
from .engine import (
    AvgPool2x2,
    Conv2d,
    Linear,
    PredictionVector,
    QuantModel,
    ReLU,
    SoftmaxScore,
    infer,
    infer_batch,
)
from .errors import (
    CraftingError,
    ParseError,
    QuantizationError,
    SeabenchError,
    TrainingDivergedError,
    ValidationError,
)
from .faults import FaultSpec, Polarity, apply_fault, faulted_infer
from .floatnet import FloatModel, float_cnn, float_mlp, grad
from .qtensor import QTensor, compute_dec, dequantize, quantize, requantize_shift
from .recovery import (
    BitKnowledge,
    CampaignConfig,
    ProbeResult,
    lsbl_propagate,
    projected_range,
    recovery_stats,
    run_campaign,
    sea_probe,
)
from .training import (
    ConstraintSet,
    HyperParams,
    loss_sub,
    pgd_attack,
    train_substitute,
    train_victim,
)

__version__ = "0.1.0"
