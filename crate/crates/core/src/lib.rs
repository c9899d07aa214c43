//! Voice/accompaniment separation for music, end to end: a spectrogram
//! masking front end, a densely-connected UNet with optional self-attention
//! subnets, L1-mask training with Adam, overlap-averaged full-track
//! inference, and projection-based BSS metrics.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense N-d float tensors on a reverse-mode tape, plus a
//!   finite-difference gradient checker.
//! - [`nn`]: the differentiable layers the network needs (conv2d,
//!   transposed conv, 2x2 max pooling, linear maps, channel concat).
//! - [`dsp`]: WAV IO and the STFT/iSTFT pipeline.
//! - [`model`]: the dense-UNet / self-attention-dense-UNet assembly and
//!   mask heads.
//! - [`train`]: L1 mask loss, Adam, augmentation, the training loop and
//!   checkpoints.
//! - [`separate`]: sliding-window full-track inference with overlap
//!   averaging.
//! - [`metrics`]: SDR/SIR/SAR via orthogonal projection against references.
//! - [`synth`]: a deterministic synthetic corpus generator with
//!   controllable repetition structure.

pub mod dsp;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;
pub mod separate;
pub mod synth;
pub mod tensor;
pub mod train;

