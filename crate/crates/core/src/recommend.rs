//! Makeup recommendation: l2-normalized concatenated embeddings, Euclidean
//! distance, and exhaustive top-k retrieval over a precomputed index.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub id: String,
    pub vector: Vec<f64>,
}

/// Immutable list of embeddings with one shared dimensionality.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingIndex {
    entries: Vec<Embedding>,
    dimension: usize,
}

impl EmbeddingIndex {
    pub fn new(entries: Vec<Embedding>) -> Result<Self> {
        let dimension = entries.first().map_or(0, |e| e.vector.len());
        let mut seen = std::collections::BTreeSet::new();
        for e in &entries {
            if e.vector.len() != dimension {
                return Err(Error::Dimension(format!(
                    "embedding '{}' has dimension {}, index uses {dimension}",
                    e.id,
                    e.vector.len()
                )));
            }
            if e.vector.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "embedding '{}' contains non-finite values",
                    e.id
                )));
            }
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Argument(format!("duplicate embedding id '{}'", e.id)));
            }
        }
        Ok(EmbeddingIndex {
            entries,
            dimension,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn entries(&self) -> &[Embedding] {
        &self.entries
    }
}

/// Concatenation of the two l2-normalized halves; the result has norm
/// sqrt(2).
pub fn normalize_concat(v1: &[f64], v2: &[f64]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(v1.len() + v2.len());
    for (name, v) in [("first", v1), ("second", v2)] {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::Argument(format!(
                "{name} vector must be nonzero and finite"
            )));
        }
        out.extend(v.iter().map(|x| x / norm));
    }
    Ok(out)
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// k nearest entries by Euclidean distance, ascending; ties break by id.
pub fn knn_query(
    index: &EmbeddingIndex,
    query: &[f64],
    k: usize,
) -> Result<Vec<(String, f64)>> {
    if index.is_empty() {
        return Err(Error::Argument("empty embedding index".into()));
    }
    if query.len() != index.dimension() {
        return Err(Error::Dimension(format!(
            "query dimension {} does not match index dimension {}",
            query.len(),
            index.dimension()
        )));
    }
    if k == 0 || k > index.len() {
        return Err(Error::Argument(format!(
            "k must be in 1..={}, got {k}",
            index.len()
        )));
    }
    let mut scored: Vec<(String, f64)> = index
        .entries()
        .iter()
        .map(|e| (e.id.clone(), euclidean(&e.vector, query)))
        .collect();
    scored.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(scored)
}

// --- index file format ---
//
// One JSON record per line; either a pre-combined vector or raw halves that
// are normalized and concatenated on load:
//   {"id": "face-001", "embedding": [ ... ]}
//   {"id": "face-002", "fc6": [ ... ], "fc7": [ ... ]}

#[derive(Serialize, Deserialize)]
struct IndexRecord {
    id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    embedding: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    fc6: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    fc7: Option<Vec<f64>>,
}

pub fn parse_record(line: &str) -> std::result::Result<Embedding, String> {
    let record: IndexRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let vector = match (record.embedding, record.fc6, record.fc7) {
        (Some(v), None, None) => v,
        (None, Some(a), Some(b)) => normalize_concat(&a, &b).map_err(|e| e.to_string())?,
        _ => {
            return Err("record needs either 'embedding' or both 'fc6' and 'fc7'".to_string());
        }
    };
    Ok(Embedding {
        id: record.id,
        vector,
    })
}

pub fn load_index(path: &Path) -> Result<EmbeddingIndex> {
    let file = std::fs::File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut entries = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let embedding = parse_record(&line).map_err(|detail| Error::Parse {
            path: path.to_path_buf(),
            detail: format!("line {}: {detail}", lineno + 1),
        })?;
        entries.push(embedding);
    }
    EmbeddingIndex::new(entries)
}

pub fn save_index(index: &EmbeddingIndex, path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    for e in index.entries() {
        let record = IndexRecord {
            id: e.id.clone(),
            embedding: Some(e.vector.clone()),
            fc6: None,
            fc7: None,
        };
        let line =
            serde_json::to_string(&record).map_err(|err| Error::Internal(err.to_string()))?;
        writeln!(file, "{line}").map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn normalize_concat_hand_example() {
        let out = normalize_concat(&[3.0, 4.0], &[0.0, 5.0]).unwrap();
        assert_eq!(out, vec![0.6, 0.8, 0.0, 1.0]);
    }

    #[test]
    fn normalize_concat_unit_inputs_unchanged() {
        let out = normalize_concat(&[1.0, 0.0], &[0.0, -1.0]).unwrap();
        assert_eq!(out, vec![1.0, 0.0, 0.0, -1.0]);
    }

    #[test]
    fn normalize_concat_norm_is_sqrt2() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let v1: Vec<f64> = (0..16).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let v2: Vec<f64> = (0..16).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let out = normalize_concat(&v1, &v2).unwrap();
            let norm = out.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 2f64.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_concat_rejects_zero_vector() {
        assert!(normalize_concat(&[0.0, 0.0], &[1.0]).is_err());
    }

    fn small_index() -> EmbeddingIndex {
        EmbeddingIndex::new(vec![
            Embedding {
                id: "a".into(),
                vector: vec![1.0, 0.0],
            },
            Embedding {
                id: "b".into(),
                vector: vec![0.0, 1.0],
            },
        ])
        .unwrap()
    }

    #[test]
    fn knn_hand_example() {
        let idx = small_index();
        let result = knn_query(&idx, &[1.0, 0.0], 2).unwrap();
        assert_eq!(result[0].0, "a");
        assert_eq!(result[0].1, 0.0);
        assert!((result[1].1 - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn knn_full_ordering_is_ascending() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let entries: Vec<Embedding> = (0..50)
            .map(|i| Embedding {
                id: format!("e{i:03}"),
                vector: (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            })
            .collect();
        let idx = EmbeddingIndex::new(entries).unwrap();
        let q: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let result = knn_query(&idx, &q, idx.len()).unwrap();
        assert_eq!(result.len(), 50);
        for pair in result.windows(2) {
            assert!(pair[0].1 <= pair[1].1);
        }
    }

    #[test]
    fn knn_matches_brute_force_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let entries: Vec<Embedding> = (0..200)
            .map(|i| Embedding {
                id: format!("e{i:04}"),
                vector: (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            })
            .collect();
        let idx = EmbeddingIndex::new(entries.clone()).unwrap();
        let q: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let got = knn_query(&idx, &q, 10).unwrap();
        let mut oracle: Vec<(String, f64)> = entries
            .iter()
            .map(|e| {
                let d2: f64 = e
                    .vector
                    .iter()
                    .zip(&q)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                (e.id.clone(), d2.sqrt())
            })
            .collect();
        oracle.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then_with(|| a.0.cmp(&b.0)));
        oracle.truncate(10);
        assert_eq!(got, oracle);
    }

    #[test]
    fn knn_validates_arguments() {
        let idx = small_index();
        assert!(knn_query(&idx, &[1.0], 1).is_err());
        assert!(knn_query(&idx, &[1.0, 0.0], 3).is_err());
        assert!(knn_query(&EmbeddingIndex::default(), &[1.0], 1).is_err());
    }

    #[test]
    fn distance_symmetry_and_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        assert!((euclidean(&a, &b) - euclidean(&b, &a)).abs() < 1e-12);
        assert!(euclidean(&a, &a) < 1e-12);
    }

    #[test]
    fn index_round_trip_and_halves() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("index.jsonl");
        let idx = small_index();
        save_index(&idx, &path).unwrap();
        let loaded = load_index(&path).unwrap();
        assert_eq!(loaded.entries(), idx.entries());

        // raw halves normalized on load
        std::fs::write(
            &path,
            "{\"id\": \"h\", \"fc6\": [3.0, 4.0], \"fc7\": [0.0, 5.0]}\n",
        )
        .unwrap();
        let loaded = load_index(&path).unwrap();
        assert_eq!(loaded.entries()[0].vector, vec![0.6, 0.8, 0.0, 1.0]);
    }

    #[test]
    fn empty_file_is_a_valid_empty_index() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(load_index(&path).unwrap().is_empty());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "{\"id\": \"a\", \"embedding\": [1.0]}\nnot json\n").unwrap();
        match load_index(&path) {
            Err(Error::Parse { detail, .. }) => assert!(detail.contains("line 2")),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn three_record_fixture_preserves_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("three.jsonl");
        std::fs::write(
            &path,
            concat!(
                "{\"id\": \"z\", \"embedding\": [1.0, 0.0]}\n",
                "{\"id\": \"a\", \"embedding\": [0.0, 1.0]}\n",
                "{\"id\": \"m\", \"embedding\": [0.5, 0.5]}\n",
            ),
        )
        .unwrap();
        let idx = load_index(&path).unwrap();
        let ids: Vec<&str> = idx.entries().iter().map(|e| e.id.as_str()).collect();
        assert_eq!(ids, ["z", "a", "m"]);
    }
}
