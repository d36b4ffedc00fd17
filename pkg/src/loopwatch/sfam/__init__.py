from .model import (ActionCritic, SfamConfig, action_labels, critic_logits, kl_uniform,
                    stage1_loss, stage2_losses)
from .prednet import PredNet, PrednetState, StepTrace
from .scoring import (DissimilarityProfile, conditioned_predictions,
                      conditioned_predictions_batch, dissimilarity_profile, rollout_predict,
                      sfam_deviation)
from .train import SfamLog, stack_windows, train_sfam

__all__ = [
    "ActionCritic", "DissimilarityProfile", "PredNet", "PrednetState", "SfamConfig", "SfamLog",
    "StepTrace", "action_labels", "conditioned_predictions", "conditioned_predictions_batch",
    "critic_logits", "dissimilarity_profile", "kl_uniform", "rollout_predict",
    "sfam_deviation", "stack_windows", "stage1_loss", "stage2_losses", "train_sfam",
]
