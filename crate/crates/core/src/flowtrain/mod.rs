//! Flow-matching objective, frame conditioning, Euler sampling and the training loop.

pub mod curriculum;
pub mod objective;
pub mod sampler;
pub mod toy;
pub mod train;

pub use curriculum::{curriculum_schedule, CurriculumConfig, StageDescriptor, StageSpec};
pub use objective::{apply_condition_mask, flow_loss, interpolate, ConditionMask, ConditionedInput};
pub use sampler::{invert, sample, sample_from, VelocityModel};
pub use toy::moving_square_latents;
pub use train::{flow_batch_loss, FlowBatch, FlowStepMetrics, FlowTrainer, MaskPolicy, MetricsRecord, MetricsWriter};
