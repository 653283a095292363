use std::path::Path;

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Load a CSV with a header row. The column named `label` holds integer
/// class ids; every other column is a numeric feature.
pub fn load_csv(path: &Path, split: Split) -> Result<Dataset> {
    let bad = |msg: String| Error::Parse {
        path: path.to_path_buf(),
        msg,
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => Error::io(path, std::io::Error::other(e.to_string())),
        _ => bad(e.to_string()),
    })?;
    let headers = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
    let label_col = headers
        .iter()
        .position(|h| h.trim() == "label")
        .ok_or_else(|| bad("no `label` column".into()))?;
    let width = headers.len() - 1;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| bad(e.to_string()))?;
        for (col, field) in record.iter().enumerate() {
            let field = field.trim();
            if col == label_col {
                labels.push(
                    field
                        .parse::<usize>()
                        .map_err(|e| bad(format!("row {}: label `{field}`: {e}", row + 1)))?,
                );
            } else {
                features.push(
                    field
                        .parse::<f64>()
                        .map_err(|e| bad(format!("row {}: value `{field}`: {e}", row + 1)))?,
                );
            }
        }
    }
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    let n = labels.len();
    Dataset::new(Tensor::new(vec![n, width], features)?, labels, classes, split)
}
