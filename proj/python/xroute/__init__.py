"""Python bindings for the xroute expert-selection engine."""

from ._xroute import (  # noqa: F401
    NumericError,
    UsageError,
    ValidationError,
    asymptotic_costs,
    bernoulli_kl,
    bootstrap_ci,
    build_slices,
    count_params,
    epn_select,
    estimate_task_distribution,
    kl_select,
    knn_select,
    loocv_1nn_accuracy,
    random_select,
    read_embeddings,
    run_benchmark,
    set_num_threads,
    write_embeddings,
)

__all__ = [name for name in dir() if not name.startswith("_")]
