"""fgleak: a desk-scale simulator of federated graph learning and of a
label-distribution inference attack driven by global-model clipping, with
label-DP and DP-training defenses.
"""

from .attack import (
    AttackConfig,
    AttackRecord,
    AttackSchedule,
    AttackStats,
    InferredDistribution,
    clip_global_model,
    compute_err,
    extract_attack_stats,
    extract_link_attack_stats,
    infer_graph_density,
    infer_label_distribution,
    make_dummy_graph,
    make_dummy_pairs,
)
from .defenses import (
    DefenseConfig,
    apply_label_dp,
    bound_degrees,
    dp_gnn_local_train,
    label_dp_randomize,
)
from .federation import (
    ClientState,
    ClientUpdate,
    RoundHooks,
    RoundLog,
    aggregate_models,
    client_local_train,
    run_training,
    uniform_weights,
)
from .graphs import (
    Graph,
    Partition,
    generate_synthetic,
    load_graph,
    normalize_adjacency,
    partition_graph,
    save_graph,
)
from .metrics import cosine_similarity, js_divergence, variance_report
from .nn import (
    ForwardTrace,
    ModelConfig,
    ModelParams,
    accuracy,
    apply_sgd_step,
    compute_loss_and_gradients,
    forward_pass,
    init_params,
    link_loss_and_gradients,
    link_pair_forward,
    load_params,
    save_params,
)

__version__ = "0.1.0"
