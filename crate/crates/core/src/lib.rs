// SPDX-License-Identifier: Apache-2.0

pub mod error;
pub mod knn;
pub mod losses;
pub mod mcspn;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod pointcloud;
pub mod projection;
pub mod tensor;
pub mod topology;

pub use error::{Error, Result};
