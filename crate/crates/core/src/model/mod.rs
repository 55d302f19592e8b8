//! The tiny decoder-only transformer: configuration, weights, forward pass
//! with neuron masking, SGD training, weight files and planted models.

mod config;
mod forward;
mod io;
mod neuron;
mod planted;
mod train;
mod weights;

pub use config::{Activation, ModelConfig, NeuronLayout, Norm};
pub(crate) use forward::logits_with_bits;
pub use forward::{activate, activate_grad, check_tokens, forward, forward_masked, log_softmax_at, ForwardTrace, LayerTrace, Token};
pub use io::{deserialize_model, serialize_model, FORMAT_VERSION, MAGIC};
pub use neuron::{parse_neuron_ids, Method, NeuronId, NeuronSet, SelectionSidecar};
pub use planted::{build_planted, PlantSpec, PlantedModel};
pub use train::{loss_and_grad, sequence_loss, train, TrainConfig, TrainOutcome};
pub use weights::{build_model, init_std, LayerWeights, ModelWeights};
