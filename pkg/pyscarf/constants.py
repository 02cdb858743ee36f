from enum import Enum


class FusionKind(Enum):
    plain = "plain"
    conv_fusion = "conv_fusion"
    topdown = "topdown"
    unilstm = "unilstm"
    scarf_no_attention = "scarf_no_attention"
    scarf_full = "scarf_full"


class CombineMode(Enum):
    concat = "concat"
    add = "add"


class Difficulty(Enum):
    easy = "easy"
    hard = "hard"


class Stage(Enum):
    pyramid = "pyramid"
    scarf = "scarf"


class InitScheme(Enum):
    kaiming_uniform = "kaiming_uniform"
    zeros = "zeros"
    constant = "constant"


class Shape(Enum):
    square = 1
    circle = 2
    triangle = 3


BACKGROUND = 0
ANCHOR_RATIOS = (1.0, 2.0, 0.5)
BOX_VARIANCES = (0.1, 0.2)
