//! Self-supervised SAR-style image retrieval.
//!
//! A small conv encoder is trained with momentum contrastive learning on
//! homography-augmented patches. Its l2-normalized descriptors populate an
//! exact inner-product index, which is scored against geographic-overlap
//! ground truth (mAP, mP@n).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod binio;
pub mod error;
pub mod raster;
pub mod homography;
pub mod real;
pub mod encoder;
pub mod contrastive;
pub mod index;
pub mod eval;
pub mod datagen;

pub use error::{Error, ErrorKind, Result};
pub use real::Real;
