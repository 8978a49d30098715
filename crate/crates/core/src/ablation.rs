//! Incremental feature-ablation ladder: train once per (ladder rung, seed),
//! report mean span F1, standard deviation over seeds, and the delta against
//! the previous rung.

use serde_json::{json, Value};

use crate::config::Config;
use crate::conll::LabeledSentence;
use crate::error::{Error, Result};
use crate::features::{LevelSet, LEVEL_ORDER};
use crate::kge::KgeModel;
use crate::ner::{train_ner, Knowledge, TrainResources};

pub struct AblationRow {
    pub label: String,
    pub levels: Vec<&'static str>,
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// Change versus the previous rung; `None` on the first row.
    pub delta: Option<f64>,
}

pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Train the ladder `word, +char, ..., +global` up to `rungs` levels with
/// each seed, evaluating on `eval` after training. Within a run the dev set
/// is empty: final-epoch parameters are measured, keeping runs cheap and
/// deterministic.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation(
    base: &Config,
    train: &[LabeledSentence],
    eval: &[LabeledSentence],
    rungs: usize,
    seeds: &[u64],
    vectors: Option<&crate::features::VectorFile>,
    knowledge: Option<Knowledge>,
    kge: Option<&KgeModel>,
) -> Result<AblationReport> {
    if rungs == 0 || rungs > LEVEL_ORDER.len() {
        return Err(Error::config(format!(
            "ablation rungs must be 1..=6, got {rungs}"
        )));
    }
    if seeds.is_empty() {
        return Err(Error::config("ablation needs at least one seed"));
    }
    let mut rows: Vec<AblationRow> = Vec::with_capacity(rungs);
    for rung in 1..=rungs {
        let levels = LevelSet::prefix(rung);
        let mut config = base.clone();
        config.features.levels = levels;
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let resources = TrainResources {
                vectors,
                train_ctx: None,
                dev_ctx: None,
                knowledge,
                kge: kge.cloned(),
            };
            let (model, _report) = train_ner(&config, train, &[], resources, seed)?;
            let prf = model.evaluate(eval, None, knowledge)?;
            per_seed.push(prf.f1);
        }
        let (mean, std) = mean_std(&per_seed);
        let delta = rows.last().map(|prev: &AblationRow| mean - prev.mean);
        let label = if rung == 1 {
            LEVEL_ORDER[0].name().to_string()
        } else {
            format!("+{}", LEVEL_ORDER[rung - 1].name())
        };
        rows.push(AblationRow {
            label,
            levels: levels.names(),
            per_seed,
            mean,
            std,
            delta,
        });
    }
    Ok(AblationReport {
        seeds: seeds.to_vec(),
        rows,
    })
}

impl AblationReport {
    /// Aligned plain-text table.
    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<12} {:>8} {:>8} {:>8}   per-seed\n",
            "level", "mean F1", "stddev", "delta"
        ));
        for row in &self.rows {
            let delta = row
                .delta
                .map(|d| format!("{d:+.4}"))
                .unwrap_or_else(|| "-".to_string());
            let per_seed = row
                .per_seed
                .iter()
                .map(|f| format!("{f:.4}"))
                .collect::<Vec<_>>()
                .join(" ");
            out.push_str(&format!(
                "{:<12} {:>8.4} {:>8.4} {:>8}   {}\n",
                row.label, row.mean, row.std, delta, per_seed
            ));
        }
        out
    }

    /// Machine-readable sidecar.
    pub fn to_json(&self) -> Value {
        json!({
            "seeds": self.seeds,
            "rows": self.rows.iter().map(|r| json!({
                "label": r.label,
                "levels": r.levels,
                "per_seed": r.per_seed,
                "mean": r.mean,
                "std": r.std,
                "delta": r.delta,
            })).collect::<Vec<_>>(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_of_singleton_is_value_and_zero() {
        let (m, s) = mean_std(&[0.75]);
        assert_eq!(m, 0.75);
        assert_eq!(s, 0.0);
    }

    #[test]
    fn deltas_telescope() {
        // telescoping is a property of the definition; check on synthetic rows
        let means = [0.2, 0.5, 0.6];
        let mut rows: Vec<AblationRow> = Vec::new();
        for (i, &m) in means.iter().enumerate() {
            let delta = rows.last().map(|p: &AblationRow| m - p.mean);
            rows.push(AblationRow {
                label: format!("r{i}"),
                levels: vec![],
                per_seed: vec![m],
                mean: m,
                std: 0.0,
                delta,
            });
        }
        let sum: f64 = rows.iter().filter_map(|r| r.delta).sum();
        assert!((sum - (means[2] - means[0])).abs() < 1e-12);
    }
}
