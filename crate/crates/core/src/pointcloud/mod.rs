//! Point clouds, synthetic shape datasets, file ingestion, sampling and
//! grouping geometry, and augmentation.

mod augment;
mod geometry;
mod io;
mod synthetic;

use ndarray::{Array2, Array3, Axis};
use crate::error::{Error, Result};

pub use augment::{augment, augment_with, AugmentRecipe, Strength};
pub(crate) use augment::drop_points;
pub use geometry::{farthest_point_sample, knn_group, patchify};
pub use io::{export_dataset, load_dataset_dir, load_point_file, write_xyz, PointFormat};
pub use synthetic::{generate_dataset, generate_instances, ShapeFamily, ShapeInstance, SyntheticSpec};

/// An unordered set of 3-D points with an optional class label.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    /// `M x 3` coordinates.
    pub points: Array2<f64>,
    pub label: Option<usize>,
    pub id: String,
}

impl PointCloud {
    pub fn new(points: Array2<f64>, label: Option<usize>, id: impl Into<String>) -> Result<Self> {
        let cloud = PointCloud {
            points,
            label,
            id: id.into(),
        };
        cloud.validate()?;
        Ok(cloud)
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.ncols() != 3 {
            return Err(Error::validation(format!(
                "cloud {} has {} columns, expected 3",
                self.id,
                self.points.ncols()
            )));
        }
        if self.points.nrows() == 0 {
            return Err(Error::EmptyInput(format!("cloud {} has no points", self.id)));
        }
        if let Some((i, _)) = self.points.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::validation(format!(
                "cloud {} has a non-finite coordinate at point {}",
                self.id,
                i / 3
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }
}

/// Patch centers plus their k nearest neighbours, stored center-relative.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    /// `m x 3` absolute center coordinates.
    pub centers: Array2<f64>,
    /// `m x k x 3` neighbour offsets from their center.
    pub groups: Array3<f64>,
    /// Source-cloud index of every center.
    pub center_indices: Vec<usize>,
    /// `m x k` source-cloud indices of every group member, nearest first.
    pub neighbor_indices: Array2<usize>,
    pub source_id: String,
}

impl PatchSet {
    pub fn num_patches(&self) -> usize {
        self.centers.nrows()
    }

    pub fn patch_points(&self) -> usize {
        self.groups.len_of(Axis(1))
    }

    /// Absolute coordinates of every group member (`m x k x 3`).
    pub fn absolute_groups(&self) -> Array3<f64> {
        let mut out = self.groups.clone();
        for (i, mut group) in out.outer_iter_mut().enumerate() {
            let c = self.centers.row(i);
            for mut p in group.rows_mut() {
                p += &c;
            }
        }
        out
    }
}

/// Translates to zero centroid and scales so the farthest point has norm 1.
///
/// A cloud whose points are all identical maps to all zeros.
pub fn normalize_cloud(cloud: &PointCloud) -> Result<PointCloud> {
    cloud.validate()?;
    let centroid = cloud
        .points
        .mean_axis(Axis(0))
        .expect("validated cloud is non-empty");
    let mut points = &cloud.points - &centroid;
    let max_norm = points
        .rows()
        .into_iter()
        .map(|r| r.dot(&r).sqrt())
        .fold(0.0f64, f64::max);
    if max_norm > 0.0 {
        points /= max_norm;
    }
    Ok(PointCloud {
        points,
        label: cloud.label,
        id: cloud.id.clone(),
    })
}
