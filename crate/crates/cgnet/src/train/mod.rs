//! Training: ADAM with the poly learning-rate policy, augmentation, the
//! optimization loop, and finite-difference gradient checking.

pub mod adam;
pub mod augment;
pub mod gradcheck;
pub mod run;
pub mod schedule;

pub use adam::{adam_step, AdamState};
pub use augment::augment;
pub use gradcheck::{check_kernels, check_model, run_gradcheck, GradCheckReport};
pub use run::{train_loop, CheckpointSink, LogRecord};
pub use schedule::{poly_lr, TrainConfig};
