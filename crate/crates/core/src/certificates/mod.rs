//! Score-trajectory certificate family, the supervised OODC baseline, and
//! the label / mask transforms used for classification and segmentation data.

mod family;
mod oodc;
mod record;
mod transforms;

pub use family::{certify_family, unified_certificate, CertificateMethod, Certifier};
pub use oodc::{oodc_split, oodc_train, OodcModel};
pub use record::{CertificateRecord, Method};
pub use transforms::{mask_noise, perturb_labels, MaskNoise};

pub use crate::likelihood::{Trajectory, TrajectoryPoint};
