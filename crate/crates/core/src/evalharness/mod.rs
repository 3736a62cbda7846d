//! Datasets, synthetic data, metrics, reports and image output.

pub mod config;
pub mod dataset;
pub mod metrics;
pub mod render;
pub mod report;
pub mod synthetic;

pub use config::{DataConfig, RunConfig};
pub use dataset::{
    load_dataset, load_folder_dataset, load_image, Label, LabeledTestSet, ManifestRow, NormalImageSet, SplitManifest,
    TestEntry,
};
pub use render::{save_heatmap_png, save_image_png, save_mask_png, save_triptych_png};
pub use metrics::{grouped_iou, iou, roc_auc, GroupedIou, ThresholdPolicy};
pub use report::{
    evaluate, evaluate_checkpoint, fingerprint, read_scores_csv, score_test_set, write_scores_csv, EvalConfig,
    EvalReport, ScoreRow,
};
pub use synthetic::{generate_synthetic, materialize, AnomalyKind, SyntheticSpec, TextureParams};
