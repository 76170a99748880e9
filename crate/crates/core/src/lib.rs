//! Generative adversarial transformer prior over complex images with
//! zero-shot reconstruction of undersampled Fourier-domain acquisitions.
//!
//! The crate is organized as:
//! - [`tensor`]: minimal differentiable tensor engine (reverse mode, with a
//!   second pass through the gradient-penalty path), FFT, optimizers, STF1.
//! - [`synthesizer`], [`mapper`], [`discriminator`]: the three networks.
//! - [`training`]: adversarial pre-training of the image prior.
//! - [`imaging`]: masks, coil maps, forward/adjoint operators, phantoms.
//! - [`zeroshot`]: inference by data-consistency optimization (and the
//!   untrained-prior mode), ablations, cross-slice weight propagation.
//! - [`metrics`]: PSNR/SSIM under the max-1 normalization protocol.
//! - [`analysis`]: self- vs cross-attention cost accounting and locality
//!   probes.

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod discriminator;
pub mod error;
pub mod gradcheck;
pub mod imaging;
pub mod mapper;
pub mod metrics;
pub mod synthesizer;
pub mod tensor;
pub mod training;
pub mod zeroshot;

pub use error::{CoreError, Result};
pub use tensor::{ElemKind, Tensor};
