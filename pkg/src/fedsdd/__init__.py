"""Desk-scale federated learning simulator with distillation-based aggregation.

Trains multiple global models on reshuffled client groups, ensembles their
recent checkpoints into a teacher, and distills only the main global model,
alongside the FedAvg/FedProx/SCAFFOLD/FedDF baselines, ablation variants and
a round-time scheduler.
"""

from .aggregation import (GroupAggregate, RoundPlan, assign_groups,
                          group_average, run_group_training,
                          run_group_training_open, sample_participants)
from .data import (DataBundle, DataConfig, LabeledDataset, PartitionSpec,
                   UnlabeledPool, dirichlet_partition, load_dataset,
                   make_bundle, make_synthetic, save_dataset,
                   split_server_pool)
from .distillation import (CheckpointBuffer, CostCounter, DistillConfig,
                           EnsembleSpec, build_ensemble, distill,
                           ensemble_forward, push_checkpoint)
from .local_training import ClientState, LocalConfig, LocalResult, local_train
from .nn import (Batch, LossGrad, NetworkSpec, ParameterVector, ce_loss_grad,
                 forward, init_weights, kl_loss_grad, sgd_step, softmax)
from .orchestrators import (ExperimentConfig, MetricsRecord, RunState,
                            evaluate, run_ablation, run_ensemble_eval,
                            run_experiment, run_fedavg, run_feddf,
                            run_fedprox, run_fedsdd, run_scaffold)
from .schedsim import (AvailabilityTrace, CostModel, Schedule,
                       simulate_fedsdd_parallel, simulate_sequential,
                       teacher_cost)

__version__ = "0.1.0"
