//! Spiking neurons, the patch fuse, embeddings and the transformer backbone.

pub mod backbone;
pub mod embed;
pub mod neuron;
pub mod rpm;

pub use backbone::{tokenize, Backbone, BackboneConfig};
pub use embed::add_embeddings;
pub use neuron::{fire, neuron_forward, MultiSpikeNeuron, SpikeTensor, SpikeVar};
pub use rpm::{random_patch_fuse, FuseMode, JointInput, Layout, TokenType};
