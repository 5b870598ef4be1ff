//! LIBSVM dataset loading, row partitioning across agents, and feature
//! scaling.
//!
//! Features are stored sparsely; dense vectors only appear inside agent
//! math. Labels are remapped to {0, 1} deterministically: the smallest raw
//! label becomes 0 and every other label becomes 1, which binarizes
//! multiclass label sets as well.

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::objective::{CompositeProblem, DataPoint, L1Reg, LocalCost, LogisticCost, ScaledCost};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("line {line}: feature index {index} out of range (indices are 1-based)")]
    IndexOutOfRange { line: usize, index: i64 },
    #[error("dataset is empty")]
    Empty,
    #[error("cannot partition {rows} rows across {agents} agents")]
    TooManyAgents { rows: usize, agents: usize },
}

/// Rows of sparse feature vectors with binary labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub rows: Vec<DataPoint>,
    pub dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionMode {
    Contiguous,
    Shuffled { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScaleMode {
    #[default]
    None,
    /// Divide each feature column by its max absolute value.
    MaxAbs,
}

/// Parses the LIBSVM text format `label idx:val idx:val ...`.
///
/// Indices are 1-based in the file and mapped to 0-based; the dimension is
/// the largest index seen. Raw labels are remapped by
/// [`Dataset::remap_labels`].
pub fn load_libsvm(path: &Path) -> Result<Dataset, DataError> {
    let content = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_libsvm(&content)
}

pub fn parse_libsvm(content: &str) -> Result<Dataset, DataError> {
    let mut raw_labels: Vec<f64> = Vec::new();
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut dim = 0usize;

    for (idx, line) in content.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut tokens = line.split_whitespace();
        let label_tok = tokens.next().expect("non-empty line has a token");
        let label: f64 = label_tok.parse().map_err(|_| DataError::MalformedLine {
            line: line_no,
            reason: format!("cannot parse label {label_tok:?}"),
        })?;

        let mut features = Vec::new();
        for tok in tokens {
            let (idx_str, val_str) = tok.split_once(':').ok_or_else(|| {
                DataError::MalformedLine {
                    line: line_no,
                    reason: format!("expected index:value, got {tok:?}"),
                }
            })?;
            let raw_index: i64 = idx_str.parse().map_err(|_| DataError::MalformedLine {
                line: line_no,
                reason: format!("cannot parse feature index {idx_str:?}"),
            })?;
            if raw_index < 1 {
                return Err(DataError::IndexOutOfRange { line: line_no, index: raw_index });
            }
            let value: f64 = val_str.parse().map_err(|_| DataError::MalformedLine {
                line: line_no,
                reason: format!("cannot parse feature value {val_str:?}"),
            })?;
            let col = (raw_index - 1) as usize;
            if let Some(&(last, _)) = features.last() {
                if col <= last {
                    return Err(DataError::MalformedLine {
                        line: line_no,
                        reason: format!("feature indices not strictly increasing at {raw_index}"),
                    });
                }
            }
            dim = dim.max(col + 1);
            features.push((col, value));
        }
        raw_labels.push(label);
        rows.push(features);
    }

    if rows.is_empty() {
        return Err(DataError::Empty);
    }
    let labels = remap_labels(&raw_labels);
    let rows = rows
        .into_iter()
        .zip(labels)
        .map(|(features, label)| DataPoint { features, label })
        .collect();
    Ok(Dataset { rows, dim })
}

/// Smallest raw label maps to 0, every other label to 1.
fn remap_labels(raw: &[f64]) -> Vec<u8> {
    let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
    raw.iter().map(|&v| u8::from(v != min)).collect()
}

/// Serializes back to LIBSVM text (1-based indices, shortest round-trip
/// float formatting), so write-then-load preserves values bit-exactly.
pub fn write_libsvm(ds: &Dataset, path: &Path) -> Result<(), DataError> {
    let mut out = String::new();
    for row in &ds.rows {
        let _ = write!(out, "{}", row.label);
        for &(col, val) in &row.features {
            let _ = write!(out, " {}:{}", col + 1, val);
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

impl Dataset {
    /// First `n` rows (all rows if fewer).
    pub fn take_first(&self, n: usize) -> Dataset {
        Dataset {
            rows: self.rows.iter().take(n).cloned().collect(),
            dim: self.dim,
        }
    }

    /// Seeded sample of `n` rows without replacement.
    pub fn sample(&self, n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut indices: Vec<usize> = (0..self.rows.len()).collect();
        indices.shuffle(&mut rng);
        indices.truncate(n.min(self.rows.len()));
        indices.sort_unstable();
        Dataset {
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
            dim: self.dim,
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Splits rows across `agents` parts whose sizes differ by at most one.
///
/// `Shuffled` permutes rows with a seeded generator before the contiguous
/// split; the union of the parts is always the original multiset.
pub fn partition(ds: &Dataset, agents: usize, mode: PartitionMode) -> Result<Vec<Dataset>, DataError> {
    if agents == 0 || agents > ds.rows.len() {
        return Err(DataError::TooManyAgents { rows: ds.rows.len(), agents });
    }
    let mut order: Vec<usize> = (0..ds.rows.len()).collect();
    if let PartitionMode::Shuffled { seed } = mode {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let base = ds.rows.len() / agents;
    let extra = ds.rows.len() % agents;
    let mut parts = Vec::with_capacity(agents);
    let mut cursor = 0;
    for i in 0..agents {
        let size = base + usize::from(i < extra);
        let rows = order[cursor..cursor + size]
            .iter()
            .map(|&k| ds.rows[k].clone())
            .collect();
        parts.push(Dataset { rows, dim: ds.dim });
        cursor += size;
    }
    Ok(parts)
}

/// Scales features and reports the per-column scaling vector.
///
/// All-zero columns keep scale 1 and are left unchanged.
pub fn scale_features(ds: &Dataset, mode: ScaleMode) -> (Dataset, Array1<f64>) {
    match mode {
        ScaleMode::None => (ds.clone(), Array1::ones(ds.dim)),
        ScaleMode::MaxAbs => {
            let mut scale = Array1::<f64>::zeros(ds.dim);
            for row in &ds.rows {
                for &(col, val) in &row.features {
                    scale[col] = scale[col].max(val.abs());
                }
            }
            scale.mapv_inplace(|v| if v == 0.0 { 1.0 } else { v });
            let rows = ds
                .rows
                .iter()
                .map(|row| DataPoint {
                    features: row
                        .features
                        .iter()
                        .map(|&(col, val)| (col, val / scale[col]))
                        .collect(),
                    label: row.label,
                })
                .collect();
            (Dataset { rows, dim: ds.dim }, scale)
        }
    }
}

/// Builds the benchmark objective `(1/m) sum_i f_i + weight * |.|_1` from
/// partitioned data: each agent gets the logistic cost of its shard scaled
/// by 1/m, plus the ridge term.
pub fn logistic_consensus_problem(
    parts: Vec<Dataset>,
    dim: usize,
    ridge: f64,
    l1_weight: f64,
) -> CompositeProblem {
    let m = parts.len();
    let costs: Vec<Box<dyn LocalCost>> = parts
        .into_iter()
        .map(|part| {
            let logistic = LogisticCost::new(part.rows, dim, ridge);
            Box::new(ScaledCost::new(Box::new(logistic), 1.0 / m as f64)) as Box<dyn LocalCost>
        })
        .collect();
    CompositeProblem::new(costs, Box::new(L1Reg::new(l1_weight)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    #[test]
    fn parses_libsvm_line() {
        let ds = parse_libsvm("1 3:0.5 7:1.2\n2 1:-1\n").unwrap();
        assert_eq!(ds.dim, 7);
        assert_eq!(ds.rows[0].label, 0); // smaller raw label 1 -> 0
        assert_eq!(ds.rows[1].label, 1);
        assert_eq!(ds.rows[0].features, vec![(2, 0.5), (6, 1.2)]);
    }

    #[test]
    fn label_remap_rules() {
        // {+-1} and {1,2} both map smaller -> 0; multiclass binarizes
        let pm = parse_libsvm("-1 1:1\n+1 1:2\n").unwrap();
        assert_eq!(pm.rows[0].label, 0);
        assert_eq!(pm.rows[1].label, 1);
        let multi = parse_libsvm("3 1:1\n1 1:1\n7 1:1\n").unwrap();
        let labels: Vec<u8> = multi.rows.iter().map(|r| r.label).collect();
        assert_eq!(labels, vec![1, 0, 1]);
    }

    #[test]
    fn empty_file_is_an_error() {
        assert!(matches!(parse_libsvm(""), Err(DataError::Empty)));
        assert!(matches!(parse_libsvm("\n\n"), Err(DataError::Empty)));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = parse_libsvm("1 1:0.5\n1 nonsense\n").unwrap_err();
        match err {
            DataError::MalformedLine { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
        let err = parse_libsvm("1 0:0.5\n").unwrap_err();
        assert!(matches!(err, DataError::IndexOutOfRange { line: 1, index: 0 }));
    }

    #[test]
    fn missing_file_error_names_path() {
        let err = load_libsvm(Path::new("/nonexistent/foo.libsvm")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/foo.libsvm"));
    }

    #[test]
    fn write_then_load_round_trips_bit_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let rows: Vec<DataPoint> = (0..30)
            .map(|_| {
                let mut features = Vec::new();
                for k in 0..8 {
                    if rng.gen_bool(0.6) {
                        features.push((k, rng.gen_range(-5.0..5.0)));
                    }
                }
                DataPoint { features, label: rng.gen_range(0..2) }
            })
            .collect();
        let ds = Dataset { rows, dim: 8 };
        let dir = std::env::temp_dir().join("lbfgs_admm_roundtrip_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("rt.libsvm");
        write_libsvm(&ds, &path).unwrap();
        let back = load_libsvm(&path).unwrap();
        assert_eq!(back.rows.len(), ds.rows.len());
        for (a, b) in ds.rows.iter().zip(&back.rows) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.features, b.features); // bit-exact f64 round-trip
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    fn toy_dataset(n: usize, dim: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Dataset {
            rows: (0..n)
                .map(|_| DataPoint {
                    features: (0..dim).map(|k| (k, rng.gen_range(-4.0..4.0))).collect(),
                    label: rng.gen_range(0..2),
                })
                .collect(),
            dim,
        }
    }

    #[test]
    fn seeded_sample_is_deterministic_subset() {
        let ds = toy_dataset(40, 3, 5);
        let a = ds.sample(12, 9);
        let b = ds.sample(12, 9);
        assert_eq!(a.len(), 12);
        for (x, y) in a.rows.iter().zip(&b.rows) {
            assert_eq!(x, y);
        }
        // every sampled row exists in the original
        for row in &a.rows {
            assert!(ds.rows.contains(row));
        }
        // oversampling caps at the dataset size
        assert_eq!(ds.sample(100, 1).len(), 40);
    }

    #[test]
    fn contiguous_partition_sizes() {
        let ds = toy_dataset(10, 2, 1);
        let parts = partition(&ds, 3, PartitionMode::Contiguous).unwrap();
        let sizes: Vec<usize> = parts.iter().map(Dataset::len).collect();
        assert_eq!(sizes, vec![4, 3, 3]);
    }

    #[test]
    fn shuffled_partition_is_deterministic_and_a_bijection() {
        let ds = toy_dataset(23, 3, 2);
        let a = partition(&ds, 4, PartitionMode::Shuffled { seed: 9 }).unwrap();
        let b = partition(&ds, 4, PartitionMode::Shuffled { seed: 9 }).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.rows.len(), y.rows.len());
            for (p, q) in x.rows.iter().zip(&y.rows) {
                assert_eq!(p, q);
            }
        }
        // multiset equality with the original
        let mut original: Vec<String> = ds.rows.iter().map(|r| format!("{r:?}")).collect();
        let mut union: Vec<String> = a
            .iter()
            .flat_map(|p| p.rows.iter().map(|r| format!("{r:?}")))
            .collect();
        original.sort();
        union.sort();
        assert_eq!(original, union);
    }

    #[test]
    fn partition_rejects_more_agents_than_rows() {
        let ds = toy_dataset(3, 2, 3);
        assert!(matches!(
            partition(&ds, 5, PartitionMode::Contiguous),
            Err(DataError::TooManyAgents { rows: 3, agents: 5 })
        ));
    }

    #[test]
    fn max_abs_scaling() {
        let ds = Dataset {
            rows: vec![
                DataPoint { features: vec![(0, 4.0)], label: 0 },
                DataPoint { features: vec![(0, -2.0)], label: 1 },
            ],
            dim: 3,
        };
        let (scaled, scale) = scale_features(&ds, ScaleMode::MaxAbs);
        assert_abs_diff_eq!(scale[0], 4.0, epsilon = 1e-15);
        assert_abs_diff_eq!(scale[1], 1.0, epsilon = 1e-15); // absent column
        assert_abs_diff_eq!(scale[2], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(scaled.rows[0].features[0].1, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(scaled.rows[1].features[0].1, -0.5, epsilon = 1e-15);
        assert!(scaled.rows.iter().all(|r| r.features[0].1.abs() <= 1.0));
    }

    #[test]
    fn scaling_is_a_change_of_variables_for_unregularized_logistic() {
        // With w_scaled = scale .* w the inner products are unchanged, so
        // the unregularized logistic value is identical at matched points.
        use crate::objective::LocalCost;
        let ds = toy_dataset(15, 4, 7);
        let (scaled, scale) = scale_features(&ds, ScaleMode::MaxAbs);
        let orig = LogisticCost::new(ds.rows.clone(), 4, 0.0);
        let new = LogisticCost::new(scaled.rows.clone(), 4, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            let w = Array1::from_iter((0..4).map(|_| rng.gen_range(-1.0..1.0)));
            let w_scaled = &w * &scale;
            assert_abs_diff_eq!(
                orig.value(w.view()),
                new.value(w_scaled.view()),
                epsilon = 1e-12
            );
        }
    }
}
