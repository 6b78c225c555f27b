//! Per-coordinate ECDF state normalization onto [−1, 1].
//!
//! Each state coordinate k keeps a sorted corpus S_k of values seen in the
//! fitted dataset. Normalization maps s through the empirical CDF,
//! ŝ = 2·F̂(s) − 1 with F̂(s) = (#corpus ≤ s)/N clamped to [1/N, 1];
//! unnormalization is the empirical quantile function, picking the lowest
//! index attaining the requested quantile. Values in the corpus round-trip
//! exactly. Actions are never normalized; they are already bounded.

use super::{DataError, Dataset};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// Corpora above this size are subsampled by uniform striding.
const MAX_CORPUS: usize = 1 << 16;

/// Fitted per-coordinate ECDF normalizer for states.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    /// Sorted corpus per state coordinate.
    corpora: Vec<Vec<f64>>,
    /// Corpus sizes before any subsampling.
    source_counts: Vec<usize>,
}

impl Normalizer {
    /// Fits corpora from every state in every trajectory of the dataset.
    pub fn fit(dataset: &Dataset) -> Result<Self, DataError> {
        if dataset.episodes.is_empty() {
            return Err(DataError::Invalid("cannot fit a normalizer on an empty dataset".into()));
        }
        let dim = dataset.state_dim;
        let mut corpora = vec![Vec::new(); dim];
        for traj in &dataset.episodes {
            for s in &traj.states {
                for (k, v) in s.iter().enumerate() {
                    if !v.is_finite() {
                        return Err(DataError::Invalid(format!(
                            "non-finite state value in coordinate {k}"
                        )));
                    }
                    corpora[k].push(*v);
                }
            }
        }
        let mut source_counts = Vec::with_capacity(dim);
        for corpus in corpora.iter_mut() {
            corpus.sort_by(f64::total_cmp);
            source_counts.push(corpus.len());
            if corpus.len() > MAX_CORPUS {
                let stride = corpus.len().div_ceil(MAX_CORPUS);
                *corpus = corpus.iter().step_by(stride).copied().collect();
            }
        }
        Ok(Normalizer { corpora, source_counts })
    }

    /// Builds a normalizer directly from sorted corpora (for tests and IO).
    pub fn from_corpora(corpora: Vec<Vec<f64>>) -> Result<Self, DataError> {
        for (k, c) in corpora.iter().enumerate() {
            if c.is_empty() {
                return Err(DataError::Invalid(format!("coordinate {k} corpus is empty")));
            }
            if c.windows(2).any(|w| w[0] > w[1]) {
                return Err(DataError::Invalid(format!("coordinate {k} corpus is not sorted")));
            }
        }
        let source_counts = corpora.iter().map(Vec::len).collect();
        Ok(Normalizer { corpora, source_counts })
    }

    /// Number of state coordinates.
    pub fn state_dim(&self) -> usize {
        self.corpora.len()
    }

    /// The sorted corpus for one coordinate.
    pub fn corpus(&self, k: usize) -> &[f64] {
        &self.corpora[k]
    }

    fn is_constant(&self, k: usize) -> bool {
        let c = &self.corpora[k];
        c[0] == *c.last().unwrap()
    }

    /// The normalized value assigned to rank `i` (0-based) in a corpus of
    /// `n`: 2·(i+1)/n − 1. Both directions use this same expression, which
    /// makes normalize → unnormalize exact on corpus points.
    fn grid(i: usize, n: usize) -> f64 {
        2.0 * ((i + 1) as f64 / n as f64) - 1.0
    }

    /// Maps one coordinate value into [−1, 1].
    pub fn normalize_coord(&self, k: usize, s: f64) -> f64 {
        if self.is_constant(k) {
            return 0.0;
        }
        let corpus = &self.corpora[k];
        let n = corpus.len();
        let count = corpus.partition_point(|v| *v <= s).max(1);
        Self::grid(count - 1, n)
    }

    /// Inverse map via the empirical quantile function: the corpus value at
    /// the lowest rank whose grid value attains the query.
    pub fn unnormalize_coord(&self, k: usize, s_hat: f64) -> f64 {
        let corpus = &self.corpora[k];
        if self.is_constant(k) {
            return corpus[0];
        }
        let n = corpus.len();
        let mut lo = 0;
        let mut hi = n - 1;
        while lo < hi {
            let mid = (lo + hi) / 2;
            if Self::grid(mid, n) < s_hat {
                lo = mid + 1;
            } else {
                hi = mid;
            }
        }
        corpus[lo]
    }

    /// Normalizes a full state vector.
    pub fn normalize(&self, s: &[f64]) -> Vec<f64> {
        s.iter().enumerate().map(|(k, v)| self.normalize_coord(k, *v)).collect()
    }

    /// Unnormalizes a full state vector.
    pub fn unnormalize(&self, s_hat: &[f64]) -> Vec<f64> {
        s_hat.iter().enumerate().map(|(k, v)| self.unnormalize_coord(k, *v)).collect()
    }

    /// Writes the corpora to a text file (one value per line, 17 significant
    /// digits, with per-coordinate headers recording any subsampling).
    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let mut out = String::new();
        out.push_str("format_version=1\n");
        out.push_str(&format!("state_dim={}\n", self.corpora.len()));
        for (k, corpus) in self.corpora.iter().enumerate() {
            out.push_str(&format!(
                "coord={k} count={} source_count={}\n",
                corpus.len(),
                self.source_counts[k]
            ));
            for v in corpus {
                out.push_str(&format!("{v:.16e}\n"));
            }
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(out.as_bytes())?;
        Ok(())
    }

    /// Reads a file written by `save`.
    pub fn load(path: &Path) -> Result<Self, DataError> {
        let shown = path.display().to_string();
        let parse_err = |line: usize, message: String| DataError::Parse {
            path: shown.clone(),
            line,
            message,
        };
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut lines = reader.lines().enumerate();
        let mut expect_kv = |key: &str| -> Result<(usize, String), DataError> {
            let (i, line) = lines
                .next()
                .ok_or_else(|| parse_err(0, format!("missing {key} line")))?;
            let line = line?;
            let value = line
                .strip_prefix(&format!("{key}="))
                .ok_or_else(|| parse_err(i + 1, format!("expected {key}=..., got {line:?}")))?;
            Ok((i + 1, value.to_string()))
        };
        let (line_no, version) = expect_kv("format_version")?;
        if version != "1" {
            return Err(parse_err(line_no, format!("unsupported format_version {version}")));
        }
        let (line_no, dim) = expect_kv("state_dim")?;
        let dim: usize = dim
            .parse()
            .map_err(|e| parse_err(line_no, format!("bad state_dim: {e}")))?;
        let mut corpora = Vec::with_capacity(dim);
        let mut source_counts = Vec::with_capacity(dim);
        for k in 0..dim {
            let (i, line) = lines
                .next()
                .ok_or_else(|| parse_err(0, format!("missing header for coordinate {k}")))?;
            let line = line?;
            let mut count = None;
            let mut source_count = None;
            for part in line.split_whitespace() {
                match part.split_once('=') {
                    Some(("coord", v)) if v == k.to_string() => {}
                    Some(("count", v)) => count = v.parse::<usize>().ok(),
                    Some(("source_count", v)) => source_count = v.parse::<usize>().ok(),
                    _ => return Err(parse_err(i + 1, format!("bad coordinate header {line:?}"))),
                }
            }
            let count =
                count.ok_or_else(|| parse_err(i + 1, "coordinate header missing count".into()))?;
            let source_count = source_count
                .ok_or_else(|| parse_err(i + 1, "coordinate header missing source_count".into()))?;
            let mut corpus = Vec::with_capacity(count);
            for _ in 0..count {
                let (j, line) = lines
                    .next()
                    .ok_or_else(|| parse_err(0, format!("coordinate {k} truncated")))?;
                let line = line?;
                let v: f64 = line
                    .parse()
                    .map_err(|e| parse_err(j + 1, format!("bad value: {e}")))?;
                corpus.push(v);
            }
            corpora.push(corpus);
            source_counts.push(source_count);
        }
        let loaded = Normalizer::from_corpora(corpora)?;
        Ok(Normalizer { source_counts, ..loaded })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy() -> Normalizer {
        Normalizer::from_corpora(vec![vec![1.0, 2.0, 3.0, 4.0]]).unwrap()
    }

    #[test]
    fn direct_count_examples() {
        let n = toy();
        assert_eq!(n.normalize_coord(0, 2.0), 0.0);
        assert_eq!(n.normalize_coord(0, 1.0), -0.5);
        assert_eq!(n.normalize_coord(0, 4.0), 1.0);
    }

    #[test]
    fn round_trip_on_corpus_is_exact() {
        let n = toy();
        for &v in n.corpus(0) {
            assert_eq!(n.unnormalize_coord(0, n.normalize_coord(0, v)), v);
        }
    }

    #[test]
    fn out_of_support_queries_clamp() {
        let n = toy();
        assert_eq!(n.normalize_coord(0, -100.0), 2.0 * 0.25 - 1.0);
        assert_eq!(n.normalize_coord(0, 100.0), 1.0);
        assert_eq!(n.unnormalize_coord(0, -1.0), 1.0);
        assert_eq!(n.unnormalize_coord(0, 1.0), 4.0);
    }

    #[test]
    fn constant_coordinate_degenerates_to_zero() {
        let n = Normalizer::from_corpora(vec![vec![7.0, 7.0, 7.0]]).unwrap();
        assert_eq!(n.normalize_coord(0, 7.0), 0.0);
        assert_eq!(n.normalize_coord(0, -3.0), 0.0);
        assert_eq!(n.unnormalize_coord(0, 0.0), 7.0);
        assert_eq!(n.unnormalize_coord(0, 0.9), 7.0);
    }

    #[test]
    fn sorted_corpus_normalizes_onto_uniform_grid() {
        let corpus: Vec<f64> = (0..50).map(|i| (i as f64).sin() * 3.0 + i as f64 * 0.01).collect();
        let mut sorted = corpus.clone();
        sorted.sort_by(f64::total_cmp);
        let n = Normalizer::from_corpora(vec![sorted.clone()]).unwrap();
        for (i, v) in sorted.iter().enumerate() {
            let expect = 2.0 * (i as f64 + 1.0) / sorted.len() as f64 - 1.0;
            assert!((n.normalize_coord(0, *v) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn oversized_corpus_is_strided_and_still_monotone() {
        let big: Vec<f64> = (0..200_000).map(|i| i as f64 * 0.001).collect();
        let ds = Dataset {
            env: crate::envs::EnvName::Pointmass2d,
            state_dim: 1,
            action_dim: 1,
            quality: super::super::Quality::Medium,
            seed: 0,
            episodes: vec![super::super::Trajectory {
                states: big.iter().map(|v| vec![*v]).collect(),
                actions: vec![vec![0.0]; big.len()],
                rewards: vec![0.0; big.len()],
                terminated_early: false,
            }],
        };
        let n = Normalizer::fit(&ds).unwrap();
        assert!(n.corpus(0).len() <= MAX_CORPUS);
        assert_eq!(n.source_counts[0], 200_000);
        assert!(n.corpus(0).windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("norm.txt");
        let n = Normalizer::from_corpora(vec![
            vec![-1.5, 0.0, 0.25, 9.0],
            vec![2.0, 2.0, 2.0],
        ])
        .unwrap();
        n.save(&path).unwrap();
        let back = Normalizer::load(&path).unwrap();
        assert_eq!(n, back);
    }

    #[test]
    fn corrupt_normalizer_file_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("norm.txt");
        std::fs::write(&path, "format_version=1\nstate_dim=1\ncoord=0 count=2 source_count=2\n0.5\nnot-a-number\n").unwrap();
        let err = Normalizer::load(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains(":5:"), "error should cite line 5: {msg}");
    }

    proptest! {
        #[test]
        fn normalize_is_monotone(mut corpus in proptest::collection::vec(-50.0f64..50.0, 3..40),
                                 queries in proptest::collection::vec(-60.0f64..60.0, 2)) {
            corpus.sort_by(f64::total_cmp);
            let n = Normalizer::from_corpora(vec![corpus]).unwrap();
            let (a, b) = (queries[0].min(queries[1]), queries[0].max(queries[1]));
            prop_assert!(n.normalize_coord(0, a) <= n.normalize_coord(0, b));
        }

        #[test]
        fn normalized_values_stay_in_band(mut corpus in proptest::collection::vec(-50.0f64..50.0, 3..40),
                                          q in -60.0f64..60.0) {
            corpus.sort_by(f64::total_cmp);
            let n = Normalizer::from_corpora(vec![corpus]).unwrap();
            let v = n.normalize_coord(0, q);
            prop_assert!((-1.0..=1.0).contains(&v));
        }

        #[test]
        fn round_trip_property(mut corpus in proptest::collection::vec(-50.0f64..50.0, 3..40)) {
            corpus.sort_by(f64::total_cmp);
            let n = Normalizer::from_corpora(vec![corpus.clone()]).unwrap();
            for v in corpus {
                prop_assert_eq!(n.unnormalize_coord(0, n.normalize_coord(0, v)), v);
            }
        }
    }
}
