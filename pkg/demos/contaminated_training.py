"""
Training on contaminated data
=============================

Plant anomalies into the training split and see how MSE, Huber and
Soft-DTW training hold up. Scoring always uses squared error.
"""

from tsad.dataio import synthetic_profile
from tsad.experiment import contamination_study
from tsad.models import ModelConfig

prof = synthetic_profile(seed=0)
config = ModelConfig("itransformer_reco", W=10, S=1, M=10)

# two seeds keep this quick; the study itself defaults to five
report = contamination_study(prof, config, rates=(0.0, 0.02), seeds=[0, 1], combination="local_or")
print(report.table())
