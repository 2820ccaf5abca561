"""kvcodec: KV-cache compression via score-driven token eviction in deep
layers and similarity-learned codebook replacement in shallow ones."""

from .budget import (BudgetPlan, build_budget_plan, context_reserve_ratio,
                     endpoint_ratios, layer_ratio, retained_context_count)
from .codebook import (Codebook, CompressedHead, CompressedLayer, TokenRefs,
                       assign_or_extend, build_codebook, compress_layer,
                       normalize, reconstruct)
from .errors import BudgetError, ConfigError, FormatError, KVCodecError
from .eviction import (GROUP_AVERAGED, PER_HEAD_UNFOLDED, RetentionSet,
                       evict_layer, select_retained, unfold_gqa)
from .formats import (CacheDump, CompressedArchive, read_archive, read_dump,
                      write_archive, write_dump)
from .metrics import (CompressionReport, LayerRatios, aggregate_ratio,
                      exact_bits, layer_ratios)
from .model import (AttentionScores, HeadCache, LayerCache, ModelConfig,
                    apply_rope, attention_weights)
from .pipeline import RunConfig, compress_dump, reconstruct_dump
from .scoring import (AccumulatedScores, SimilarityMatrix, accumulated_scores,
                      cosine_similarity_matrix, gqa_accumulated_scores,
                      similarity_census, sparsity_profile)
from .simulate import (FidelityResult, SyntheticSpec, generate_random,
                       generate_synthetic, simulate_decode)

__version__ = "0.1.0"
