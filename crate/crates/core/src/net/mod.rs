//! The forked transmittance/illumination network, its loss and training loop.

mod loss;
mod network;
mod spec;
mod train;

pub use loss::{
    eta, patch_loss, total_loss, LossEvaluation, LossTerms, LossWeights, Objective, PatchTargets, TrainSample,
    DEFAULT_GAMMA,
};
pub use network::{image_to_planar, images_to_tensor, planar_to_interleaved, DehazeNet, ForkOutput};
pub use spec::{ConvSpec, DeconvSpec, NetworkSpec, ShapePlan};
pub use train::{evaluate, train, train_network, EpochLog, TrainConfig, TrainReport};

/// Builds a freshly initialised network; identical seeds give identical weights.
pub fn build_network(spec: &NetworkSpec, seed: u64) -> crate::Result<DehazeNet<f32>> {
    DehazeNet::new(spec, seed)
}
