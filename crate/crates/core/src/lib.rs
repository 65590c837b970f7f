//! Color-structure dual-student semi-supervised segmentation.
//!
//! Two students share one architecture: a color student trained on
//! stain-perturbed views and a structure student trained on elastically
//! warped views. An EMA teacher produces pseudo-labels, and entropy-based
//! uncertainty maps, amplified where the image is chromatically rich or
//! edge-dense, weight the consistency losses.
//!
//! Module map:
//!
//! | module          | contents                                                     |
//! |-----------------|--------------------------------------------------------------|
//! | [`ndcore`]      | tensors, reverse-mode graph, gradient checker, seeded RNG    |
//! | [`imaging`]     | channel variance, smoothing, edge magnitude, threshold masks |
//! | [`uncertainty`] | entropy maps, color/structure modulation, loss weights       |
//! | [`augment`]     | color jitter, histogram matching, elastic warp, flips        |
//! | [`segnet`]      | small encoder-decoder network and its checkpoint format      |
//! | [`losses`]      | cross-entropy, soft Dice, weighted consistency losses        |
//! | [`trainer`]     | AdamW, EMA strategies, the training step and `fit`           |
//! | [`data`]        | synthetic gland generator, PNG loader, split protocol        |
//! | [`harness`]     | Dice/Jaccard, fold aggregation, run configuration            |

pub mod augment;
pub mod data;
pub mod error;
pub mod harness;
pub mod imaging;
pub mod losses;
pub mod ndcore;
pub mod segnet;
pub mod trainer;
pub mod uncertainty;

pub use error::{Error, Result};
pub use ndcore::{Rng, Scalar, Tensor};
