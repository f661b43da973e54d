//! On-disk formats: models, datasets and CSV exports.

mod dataset;
mod model;
mod table;

pub use dataset::{load_dataset, save_dataset, DATASET_MAGIC, IMAGES_FILE, MANIFEST_FILE};
pub use model::{blob_path, decode_model, encode_model, load_model, save_model, MODEL_MAGIC};
pub use table::{
    contribution_csv, format_g, history_csv, intervention_csv, pointing_csv, table_csv,
    CONTRIBUTION_HEADER, HISTORY_HEADER, INTERVENTION_HEADER, POINTING_HEADER,
};
