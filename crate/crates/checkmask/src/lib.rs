//! Annotation service: annotators pick the best of several candidate masks
//! per image; picks are logged durably and exported as training masks.

pub mod dataset;
pub mod export;
pub mod selection_log;
pub mod server;

use std::path::Path;
use std::sync::{Arc, Mutex};

pub use dataset::Dataset;
pub use selection_log::{SelectionLog, SelectionRecord};
pub use server::{router, AppState, Shared};

pub const DEFAULT_LOG_FILE: &str = "selections.log";

/// Loads the data directory and replays the selection log.
pub fn open_state(data_dir: &Path, log_path: Option<&Path>) -> anyhow::Result<Shared> {
    let dataset = Dataset::open(data_dir)?;
    let log_path = log_path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| dataset.root.join(DEFAULT_LOG_FILE));
    let log = SelectionLog::open(log_path)?;
    Ok(Arc::new(AppState {
        dataset,
        log: Mutex::new(log),
    }))
}
