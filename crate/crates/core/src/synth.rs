//! Seeded synthetic transaction logs.
//!
//! Legitimate rows come from entity clusters: each cluster owns a Gaussian
//! feature centre and one category per view, and cluster popularity follows
//! a power law, so category sizes are long-tailed. Fraud rows target the
//! less popular half of the clusters, carry features shifted away from
//! their cluster and pulled toward the legitimate marginal by
//! `camouflage_strength`, and
//! with probability `inconsistency_rate` draw each view's category
//! independently, breaking the cross-view agreement legitimate rows have.

use crate::error::{Error, Result};
use crate::ingest::{Label, SchemaConfig, TransactionRecord, TransactionTable};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_rows: usize,
    pub n_views: usize,
    pub categories_per_view: usize,
    /// Exponent `s` of the popularity law `p_k ∝ k^-s` over category ranks.
    pub tail_exponent: f64,
    pub fraud_rate: f64,
    /// 0 keeps the full fraud shift; 1 makes fraud features match legitimate ones.
    pub camouflage_strength: f64,
    /// Probability that a fraud row's categories are drawn independently per view.
    pub inconsistency_rate: f64,
    pub feature_dim: usize,
    pub seed: u64,
    /// Per-dimension shift of uncamouflaged fraud features, in noise units.
    pub margin: f64,
    /// Probability that a legitimate row's category in one view is random.
    pub legit_noise: f64,
    /// Share of rows whose label is withheld.
    pub unlabeled_rate: f64,
    /// Timestamps are drawn uniformly from `[0, horizon)`.
    pub horizon: i64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_rows: 1000,
            n_views: 4,
            categories_per_view: 50,
            tail_exponent: 1.2,
            fraud_rate: 0.1,
            camouflage_strength: 0.0,
            inconsistency_rate: 0.0,
            feature_dim: 8,
            seed: 0,
            margin: 1.5,
            legit_noise: 0.05,
            unlabeled_rate: 0.0,
            horizon: 1_000_000,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_rows < 10 {
            return bad(format!("n_rows must be at least 10, got {}", self.n_rows));
        }
        if self.n_views == 0 || self.feature_dim == 0 {
            return bad("n_views and feature_dim must be positive".into());
        }
        if self.categories_per_view < 2 {
            return bad("categories_per_view must be at least 2".into());
        }
        for (name, v) in [
            ("fraud_rate", self.fraud_rate),
            ("camouflage_strength", self.camouflage_strength),
            ("inconsistency_rate", self.inconsistency_rate),
            ("legit_noise", self.legit_noise),
            ("unlabeled_rate", self.unlabeled_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.fraud_rate * (self.n_rows as f64) < 1.0 {
            return bad(format!(
                "fraud_rate {} over {} rows yields no fraud",
                self.fraud_rate, self.n_rows
            ));
        }
        if self.fraud_rate >= 1.0 {
            return bad("fraud_rate must leave legitimate rows".into());
        }
        if !(self.tail_exponent >= 0.0 && self.tail_exponent.is_finite()) {
            return bad(format!("tail_exponent must be nonnegative, got {}", self.tail_exponent));
        }
        if !(self.margin.is_finite()) || self.horizon <= 0 {
            return bad("margin must be finite and horizon positive".into());
        }
        Ok(())
    }

    pub fn view_keys(&self) -> Vec<String> {
        (0..self.n_views).map(|a| format!("v{a}")).collect()
    }

    pub fn feature_names(&self) -> Vec<String> {
        (0..self.feature_dim).map(|j| format!("f{j}")).collect()
    }

    /// Schema matching the CSV written by [`write_csv`].
    pub fn schema(&self) -> SchemaConfig {
        SchemaConfig {
            id: Some("id".into()),
            timestamp: "timestamp".into(),
            label: "label".into(),
            label_map: BTreeMap::from([
                ("0".to_string(), Label::Legit),
                ("1".to_string(), Label::Fraud),
                ("2".to_string(), Label::Unlabeled),
            ]),
            features: self.feature_names(),
            view_keys: self.view_keys(),
            delimiter: None,
        }
    }
}

/// Popularity weights `k^-s` for ranks `1..=n`.
pub fn power_law_weights(n: usize, exponent: f64) -> Vec<f64> {
    (1..=n).map(|k| (k as f64).powf(-exponent)).collect()
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Generates a table; the same config always yields the same rows.
pub fn generate(config: &SynthConfig) -> Result<TransactionTable> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let k = config.categories_per_view;
    let d = config.feature_dim;
    let a = config.n_views;

    // cluster c sits at popularity rank c; each view assigns it a category by permutation
    let centers: Vec<Vec<f64>> = (0..k).map(|_| (0..d).map(|_| gaussian(&mut rng)).collect()).collect();
    let perms: Vec<Vec<usize>> = (0..a)
        .map(|_| {
            let mut p: Vec<usize> = (0..k).collect();
            rand::seq::SliceRandom::shuffle(p.as_mut_slice(), &mut rng);
            p
        })
        .collect();
    let popularity = WeightedIndex::new(power_law_weights(k, config.tail_exponent))
        .map_err(|e| Error::Config(format!("category weights: {e}")))?;
    let tail_start = k / 2;

    let n_fraud = (config.fraud_rate * config.n_rows as f64).round().max(1.0) as usize;
    let mut is_fraud = vec![false; config.n_rows];
    is_fraud[..n_fraud].iter_mut().for_each(|f| *f = true);
    rand::seq::SliceRandom::shuffle(is_fraud.as_mut_slice(), &mut rng);

    let s = config.camouflage_strength;
    let mut rows = Vec::with_capacity(config.n_rows);
    for (i, &fraud) in is_fraud.iter().enumerate() {
        let timestamp = rng.random_range(0..config.horizon);
        let cluster = if fraud {
            rng.random_range(tail_start..k)
        } else {
            popularity.sample(&mut rng)
        };
        let inconsistent = fraud && rng.random::<f64>() < config.inconsistency_rate;
        let categories: Vec<String> = (0..a)
            .map(|v| {
                let c = if inconsistent {
                    popularity.sample(&mut rng)
                } else if !fraud && rng.random::<f64>() < config.legit_noise {
                    rng.random_range(0..k)
                } else {
                    cluster
                };
                format!("c{}", perms[v][c])
            })
            .collect();
        let features: Vec<f64> = if fraud {
            // the camouflage target is a draw from the legitimate marginal, not from this cluster
            let mimic = popularity.sample(&mut rng);
            centers[cluster]
                .iter()
                .zip(&centers[mimic])
                .map(|(&mu, &nu)| {
                    let shifted = mu + config.margin + gaussian(&mut rng);
                    let legit = nu + gaussian(&mut rng);
                    (1.0 - s) * shifted + s * legit
                })
                .collect()
        } else {
            centers[cluster].iter().map(|&mu| mu + gaussian(&mut rng)).collect()
        };
        let label = if rng.random::<f64>() < config.unlabeled_rate {
            Label::Unlabeled
        } else if fraud {
            Label::Fraud
        } else {
            Label::Legit
        };
        rows.push(TransactionRecord {
            id: i,
            external_id: format!("t{i}"),
            timestamp,
            categories,
            features,
            label,
        });
    }
    TransactionTable::new(rows, config.feature_names(), config.view_keys())
}

/// Writes the table as `id,timestamp,<views>,<features>,label`.
pub fn write_csv(table: &TransactionTable, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["id".to_string(), "timestamp".to_string()];
    header.extend(table.view_keys().iter().cloned());
    header.extend(table.feature_names().iter().cloned());
    header.push("label".into());
    w.write_record(&header)?;
    for r in table.rows() {
        let mut rec = vec![r.external_id.clone(), r.timestamp.to_string()];
        rec.extend(r.categories.iter().cloned());
        rec.extend(r.features.iter().map(|v| v.to_string()));
        rec.push(r.label.code().to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `<stem>.csv`, `<stem>.schema.json` and `<stem>.config.json` into `dir`.
pub fn write_dataset(config: &SynthConfig, dir: &Path, stem: &str) -> Result<TransactionTable> {
    let table = generate(config)?;
    std::fs::create_dir_all(dir)?;
    write_csv(&table, &dir.join(format!("{stem}.csv")))?;
    std::fs::write(
        dir.join(format!("{stem}.schema.json")),
        serde_json::to_string_pretty(&config.schema())?,
    )?;
    std::fs::write(
        dir.join(format!("{stem}.config.json")),
        serde_json::to_string_pretty(config)?,
    )?;
    Ok(table)
}

/// Row count per category of one view, in descending order.
pub fn category_sizes(table: &TransactionTable, view: usize) -> Vec<usize> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for r in table.rows() {
        *counts.entry(r.categories[view].as_str()).or_default() += 1;
    }
    let mut sizes: Vec<usize> = counts.into_values().collect();
    sizes.sort_unstable_by(|x, y| y.cmp(x));
    sizes
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn infeasible_configs_fail() {
        let c = SynthConfig {
            n_rows: 100,
            fraud_rate: 0.005,
            ..SynthConfig::default()
        };
        assert!(matches!(generate(&c), Err(Error::Config(_))));
        let c = SynthConfig {
            n_rows: 5,
            ..SynthConfig::default()
        };
        assert!(generate(&c).is_err());
        let c = SynthConfig {
            camouflage_strength: 1.5,
            ..SynthConfig::default()
        };
        assert!(generate(&c).is_err());
    }

    #[test]
    fn seeded_and_sorted() {
        let c = SynthConfig::default();
        let a = generate(&c).unwrap();
        assert_eq!(a, generate(&c).unwrap());
        assert!(a.rows().windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
        let b = generate(&SynthConfig { seed: 1, ..c }).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn fraud_rate_is_close() {
        let t = generate(&SynthConfig::default()).unwrap();
        let f = t.class_counts().fraud as f64 / t.len() as f64;
        assert!((f - 0.1).abs() <= 0.02, "{f}");
    }

    #[test]
    fn steep_tail_gives_dominant_head() {
        let c = SynthConfig {
            tail_exponent: 2.0,
            categories_per_view: 50,
            ..SynthConfig::default()
        };
        let t = generate(&c).unwrap();
        for v in 0..c.n_views {
            let sizes = category_sizes(&t, v);
            // categories that never occur count as size zero
            let mut all = sizes.clone();
            all.resize(c.categories_per_view, 0);
            let median = all[all.len() / 2];
            assert!(sizes[0] >= 10 * median.max(1), "{sizes:?}");
        }
    }
}
