"""
网络结构
"""
from .backbone import Backbone, FeaturePyramid, forward_backbone
from .network import DROPNet, NetworkOutput
from .parsing_branch import ParsingBranch, ParsingPrediction, make_parsing_prediction, parse
from .reid_branch import EmbeddingSet, IdentityHeads, ReIDBranch, build_p_reid

__all__ = [
    "Backbone", "FeaturePyramid", "forward_backbone",
    "DROPNet", "NetworkOutput",
    "ParsingBranch", "ParsingPrediction", "make_parsing_prediction", "parse",
    "EmbeddingSet", "IdentityHeads", "ReIDBranch", "build_p_reid",
]
