"""clforge: a desk-scale continual-learning laboratory.

Sequential-task training on a minimal differentiable encoder-decoder
with hybrid CTC/CE loss, eight continual-learning strategies centred on
post-adaptation weight averaging, deterministic synthetic benchmark
suites, and the AVG/BWT/FWT evaluation grid.
"""

from .errors import (CLForgeError, ConfigError, DuplicateHead, InfeasibleAlignment,
                     MissingHead, QuotaUnderflow, StructureMismatch, TrainingDiverged)
from .harness import (ExperimentConfig, RunReport, load_config, parse_config,
                      run_experiment)
from .losses import (LossConfig, ce_loss, ce_loss_and_grad, ctc_loss,
                     ctc_loss_value, hybrid_loss, kd_loss, kd_teacher_grads,
                     total_loss)
from .metrics import (SummaryMetrics, WerMatrix, avg, bwt, edit_distance, fwt,
                      summarize, wer)
from .model import (ForwardOut, ModelConfig, Utterance, backward, config_hash,
                    forward, greedy_decode, head_spec, init_params, loss_and_grad)
from .params import (AveragingSchedule, ParamStore, PartitionTag, SHARED, average,
                     chain_average, eta_for_task, init_task_head, load_checkpoint,
                     save_checkpoint, task_entry_name)
from .strategies import (MemoryBuffer, SequenceState, StrategyConfig, TrainConfig,
                         evaluate_wer, rebalance_memory, run_sequence, train_task)
from .tasks import (SuiteConfig, TaskSpec, gen_task_suite, load_dataset,
                    save_dataset, synthesize, synthesize_utterance)

__version__ = "0.1.0"
