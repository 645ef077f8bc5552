// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod imageio;
pub mod kernels;
pub mod losses;
pub mod model;
pub mod nn;
pub mod suite;
pub mod synth;
pub mod tensor;
pub mod train;

pub use autodiff::{BinaryKind, Gradients, Graph, UnaryKind, Var};
pub use error::{Error, Result};
pub use gradcheck::{finite_diff_check, CheckOptions, GradReport};
pub use imageio::{load_png, save_png, ManifestEntry};
pub use losses::{charbonnier, loss_stage, loss_total, psnr, ssim, ssim_value, LossConfig};
pub use model::{build_model, count_params, reflect_pad, Elf, ElfConfig, ElfModel, ElfOutputs, Prediction};
pub use nn::{BlockSpec, Bound, Module, ParameterStore};
pub use suite::{run_suite, SuiteOptions};
pub use synth::{DegradationKind, DegradationSpec, Sample};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use tensor::{Real, Tensor};
pub use train::{adam_step, evaluate, lr_at_epoch, run_training, run_training_validated, AdamState, EvalReport, TrainConfig};
