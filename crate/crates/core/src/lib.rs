//! Real-time facial expression retargeting.
//!
//! Tracker blendshape weights are calibrated against a neutral pose, fed
//! together with the last three primary-character controller frames into a
//! small adaption network, clamped to the primary rig and fanned out to
//! secondary characters through per-character networks. Offline, paired
//! training data comes from two-step retrieval: shortlist by emotional
//! distance (Jensen-Shannon), then pick by geometric distance.

pub mod error;
pub mod features;
mod io;
pub mod neural;
pub mod retarget;
pub mod retrieval;
pub mod rig;
pub mod stream;
pub mod synth;

pub use error::{Error, Result};
pub use features::{
    fit_stats, geometric_features, normalize_features, register_landmarks, EmotionDistribution,
    FeatureStats, GeometricFeatureVector, LandmarkSet, MeanFace, SemanticIndexMap,
};
pub use neural::{
    backward, gradient_check, load_model, mse_loss, save_model, sgd_train, sgd_train_with,
    softmax_cross_entropy, Activation, Dataset, DenseLayer, EpochStats, InputLayout, LossKind,
    ModelMetadata, NetworkModel, TrainConfig, TrainReport,
};
pub use retarget::{
    adapt_secondary, apply_calibration, build_adaption_input, build_training_tuples, calibrate,
    jitter_metric, retarget_step, upsample_linear, BlendshapeFrame, CalibrationProfile,
    ChannelList, FanOut, HistoryBuffer, PipelineConfig, PipelineManifest, RetargetPipeline,
    SecondaryCharacter, TrainingTuple,
};
pub use retrieval::{
    build_pair_database, geometric_distance, jsd, kl_divergence, two_step_match,
    Expression, ExpressionDatabase, ExpressionRecord, MatchPair, SourceTag,
};
pub use rig::{clamp_controllers, compose_blendshapes, export_mesh, BlendshapeBank, CharacterRig, ControllerFrame, ControllerSpec, Mesh};
