"""Speaker verification with a triplet embedding encoder trained jointly with
a conditional GAN and a speaker-ID classifier."""

from .features import (
    FbankSlice,
    FeatureSet,
    Utterance,
    compute_fbank,
    extract_features,
    load_features,
    make_synthetic_corpus,
    save_features,
    slice_utterance,
)
from .losses import (
    LossWeights,
    cosine_distance,
    gan_losses,
    gradient_penalty,
    softmax_loss,
    total_loss,
    triplet_loss,
)
from .nets import (
    ClassifierNet,
    DiscriminatorNet,
    EncoderNet,
    GeneratorNet,
    NetBundle,
    classify,
    discriminate,
    encode,
    generate,
    init_params,
)
from .sampler import SamplingPlan, TripletBatch, epoch_pair_count, sample_random, sample_semi_hard
from .trainer import TrainConfig, Trainer, load_checkpoint, resume, train
from .evalkit import (
    DetCurve,
    SpeakerModel,
    TrialScoreSet,
    build_trials,
    compute_accuracy,
    compute_eer,
    det_curve,
    embedding_dim_sweep,
    enroll,
    evaluate_encoder,
    score_trial,
)

__version__ = "0.1.0"
