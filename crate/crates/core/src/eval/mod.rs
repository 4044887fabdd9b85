//! Overlap and surface metrics, meshes, strain and per-frame reports.

mod mc_tables;
mod mesh;
mod metrics;
mod report;
mod strain;

pub use mesh::{marching_cubes, marching_cubes_smoothed, warp_mesh, TriMesh};
pub use metrics::{dice, hausdorff_mm, mean_surface_distance, percentile, surface_distances};
pub use report::{
    evaluate_cycle, frame_report, method_table_csv, CycleReport, CycleSummary, FrameReport,
    MeanStd, FRAME_CSV_HEADER,
};
pub use strain::{green_lagrange, StrainField};
