"""Desk-scale simulator for trust-clustered hierarchical split training of a
toy transformer with low-rank adapters, sketch-compressed boundary traffic,
and a privacy-attack evaluation suite."""

from .clustering import (AffinityMatrix, ClusterAssignment, Topology,
                         affinity, assign_clients, feasible_servers,
                         merge_low_trust, spectral_cluster)
from .codec import (PerturbationBasis, Sketch, SketchParams, build_basis,
                    build_perturbation, channel_forward, compression_ratio,
                    fit_subspace, gen_rotation, perturb, sketch_decode,
                    sketch_encode)
from .errors import (AggregationError, ConfigError, DecodeError, InputError,
                     NumericError, ProtocolError, SimError, UnavailableError,
                     UsageError)
from .fingerprint import (DivergenceMatrix, Fingerprint, ProbeSet,
                          build_probe_set, divergence_matrix,
                          extract_fingerprint, kl_gauss, sym_kl, trust_score,
                          trust_scores)
from .metrics import (BoundInputs, CommModel, LabeledDataset, PartitionSpec,
                      PrivacyReport, RunArtifacts, comm_cost, comm_time,
                      grad_norm_trace, make_synthetic_corpus, partition_data,
                      privacy_eval, theorem_bound, total_time)
from .model import (Activation, ModelConfig, SplitModelState, SplitTape,
                    backward_split, forward_part1, forward_part2,
                    forward_part3_loss, init_model, sgd_step)
from .protocol import (RunConfig, TrainingChannel, TrainingLog,
                       check_convergence, compute_alpha, edge_consolidate,
                       fingerprint_and_cluster, global_aggregate,
                       local_split_round, normalize_alphas, run_elsa,
                       run_fedavg)

__version__ = "0.1.0"
