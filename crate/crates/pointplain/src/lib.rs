//! Plain transformers for point clouds, built from scratch on CPU.
//!
//! The crate is organized around the stages of the pipeline:
//!
//! * [`tensor`] — dense `f64` tensors with a reverse-mode tape, the AdamW
//!   optimizer, the warmup+cosine schedule, and a finite-difference
//!   gradient-check harness.
//! * [`geom`] — point-cloud containers and geometric kernels (pairwise
//!   distances, farthest point sampling, k-NN, nearest-key assignment).
//! * [`patchify`] — the four grouping strategies (ball query, kNN, k-means,
//!   farthest point clustering) that cut a cloud into M patches of K points.
//! * [`embed`] — patch embedding (shared PointNet) and the position
//!   embeddings (MLP, global-pooling, Fourier, none).
//! * [`encoder`] — multi-head attention and the plain transformer stack.
//! * [`mae`] — masked-autoencoder pre-training with the three-way
//!   dropped/reserved/masked patch partition and the Chamfer-L2 loss.
//! * [`seghead`] — inverse-distance feature interpolation and the per-point
//!   segmentation head.
//! * [`io`], [`synth`], [`augment`], [`config`], [`checkpoint`], [`train`] —
//!   file formats, the synthetic scene generator, data augmentation, run
//!   configuration, checkpointing, and the pre-training loop.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod embed;
pub mod encoder;
pub mod error;
pub mod geom;
pub mod gradsuite;
pub mod io;
pub mod mae;
pub mod nn;
pub mod patchify;
pub mod rng;
pub mod seghead;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::Rng;
