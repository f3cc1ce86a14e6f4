//! Annotation refinement against depth frames: rendering, visibility,
//! keypoint-level and object-level corrections.

mod cloud;
mod depth;
mod fpfh;
mod icp;
mod refine;
mod surface;

pub use cloud::{
    back_project, back_project_with_normals, crop_by_keypoint_volume, crop_indices, keypoint_diagonal, DepthCloud, PointCloud,
};
pub use depth::{render_depth, DepthImage};
pub use fpfh::{descriptor_distance, fpfh, pair_features, Descriptor, FpfhEstimator, FpfhResult, FPFH_BINS, FPFH_LEN};
pub use icp::{icp_point_to_plane, IcpConfig, IcpResult};
pub use refine::{
    feature_match_refine, jump_edge_adjust, keypoint_refine, object_refine, occlusion_test, project_frame, project_keypoints,
    AnnotationConfig, AnnotationFrame, AnnotationMode, FeatureSource, ObjectRefinement, ProjectedKeypoint, Refinement, Visibility,
};
pub use surface::SurfaceModel;
