//! Noise schedule, forward noising, guided DDIM sampling and teacher training.

mod sampler;
mod schedule;
mod train;

pub use sampler::{
    cfg_eps, ddim_coefficients, ddim_step, ddim_update, forward_noise, forward_noise_rows,
    gamma_step, sample_chain, sample_chain_graph, sample_with_model, CallCounter, Sampler,
    SamplerConfig,
};
pub use schedule::{NoiseSchedule, ScheduleKind, ALPHA_BAR_MIN};
pub use train::{eps_mse, train_teacher, TrainConfig, TrainedTeacher};
pub(crate) use train::stack_rows;
