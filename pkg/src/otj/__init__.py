"""On-the-job learning engine: streaming structured prediction that queries a
crowd when uncertain, plans with Monte-Carlo tree search, and trains itself
from the answers so crowd reliance decays over time."""

__version__ = "0.1.0"

from .crf import (
    CrfModel,
    LabelSet,
    TokenSequence,
    adagrad_update,
    compute_potentials,
    condition_on_responses,
    extract_features,
    forward_backward,
    load_model,
    save_model,
    viterbi_map,
)
from .environment import (
    CrowdResponse,
    EnvironmentModel,
    FrozenPool,
    LatencyModel,
    PoolExhausted,
    ResponseModel,
    load_frozen_pool,
    posterior_predictive_response,
)
from .game import (
    RETURN,
    WAIT,
    Action,
    GameState,
    IllegalAction,
    PosteriorCache,
    Query,
    UtilityParams,
    apply_crowd_response,
    apply_system_action,
    expected_accuracy,
    legal_actions,
    new_game,
    sample_crowd_move,
    utility,
)
from .policy import (
    PolicyConfig,
    ThresholdConfig,
    mcts_decide,
    nvote_aggregate,
    nvote_decide,
    online_decide,
    threshold_decide,
)
from .harness import (
    Dataset,
    EpisodeRecord,
    MetricsSummary,
    compute_metrics,
    export_results,
    load_sequence_dataset,
    run_stream,
)
from .config import ConfigError, RunConfig, build_run_config, parse_config_file
from .synth import synthesize_dataset, write_dataset_file
