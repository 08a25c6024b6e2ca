//! Small dense models with analytic examplewise gradients.

mod data;
mod fd;
mod mlp;
mod params;

pub use data::{BatchSampler, Dataset, Example, SamplingStrategy};
pub use fd::{central_difference, finite_difference_grad};
pub use mlp::{bias_id, weight_id, Activation, BufferMeter, Loss, Metered, Mlp, StreamReport};
pub use params::{BlockShape, ParamBlock, Params};
