//! Evaluation metrics, feature views and report output.

pub mod alignment;
pub mod eval;
pub mod pca;
pub mod probe;

use std::fs;
use std::io::Write;
use std::path::Path;

pub use alignment::{
    palette_distance, region_color_error, self_similarity_distance, structure_iou, AlignmentReport, ColorHistogram,
    IouReport,
};
pub use pca::{pca_feature_view, principal_components, FeatureBatch, PcaView};
pub use probe::{LinearProbe, ProbeConfig};

use crate::error::{Error, Result};
use crate::image::RgbImage;

/// Writes one JSON object per report, validating each first.
pub fn write_reports(path: &Path, reports: &[AlignmentReport]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in reports {
        r.validate()?;
        let line = serde_json::to_string(r).expect("report serialises");
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Rows of equally sized images laid out with a 2 px gap.
pub fn summary_grid(rows: &[Vec<RgbImage>]) -> Result<RgbImage> {
    let lines = rows
        .iter()
        .map(|r| RgbImage::hstack(&r.iter().collect::<Vec<_>>(), 2))
        .collect::<Result<Vec<_>>>()?;
    RgbImage::vstack(&lines.iter().collect::<Vec<_>>(), 2)
}
