//! Component ablations: train each model variant on the same data and
//! compare test mAP.

use serde::{Deserialize, Serialize};

use crate::config::{AssociationMode, Config, ModelConfig, ValidConfig};
use crate::data::Dataset;
use crate::trainer::{TrainError, Trainer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    SharedEncoder,
    NoFusion,
    EntangledDecoder,
    QueryDecomposition,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::SharedEncoder,
        Variant::NoFusion,
        Variant::EntangledDecoder,
        Variant::QueryDecomposition,
    ];

    /// The config switch this variant flips.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::SharedEncoder => "encoder_disentangled=false",
            Variant::NoFusion => "fusion_enabled=false",
            Variant::EntangledDecoder => "decoder_disentangled=false",
            Variant::QueryDecomposition => "association_mode=query_decomposition",
        }
    }

    pub fn apply(self, m: &mut ModelConfig) {
        match self {
            Variant::Full => {}
            Variant::SharedEncoder => m.encoder_disentangled = false,
            Variant::NoFusion => m.fusion_enabled = false,
            Variant::EntangledDecoder => m.decoder_disentangled = false,
            Variant::QueryDecomposition => m.association_mode = AssociationMode::QueryDecomposition,
        }
    }

    pub fn config(self, base: &ValidConfig, seed: u64) -> Result<ValidConfig, TrainError> {
        let mut c: Config = base.to_config();
        self.apply(&mut c.model);
        c.train.seed = seed;
        Ok(c.validate()?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub full: f64,
    pub rare: Option<f64>,
    pub non_rare: Option<f64>,
    pub final_loss: f64,
    pub seconds: f64,
}

/// Trains one variant from scratch and evaluates it on `test`.
pub fn run_variant(
    base: &ValidConfig,
    variant: Variant,
    seed: u64,
    train: &Dataset,
    test: &Dataset,
) -> Result<AblationRow, TrainError> {
    let start = std::time::Instant::now();
    let mut t = Trainer::new(variant.config(base, seed)?);
    t.fit(train, None, None)?;
    let report = t.evaluate(test, train)?;
    Ok(AblationRow {
        variant,
        seed,
        full: report.full,
        rare: report.rare,
        non_rare: report.non_rare,
        final_loss: t.history.last().map_or(f64::NAN, |r| r.loss),
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Median; even counts average the two middle values.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

/// Per-variant median over seeds, in `Variant::ALL` order.
pub fn summarize(rows: &[AblationRow]) -> Vec<(Variant, f64, Option<f64>, Option<f64>)> {
    Variant::ALL
        .iter()
        .filter(|v| rows.iter().any(|r| r.variant == **v))
        .map(|&v| {
            let mine: Vec<&AblationRow> = rows.iter().filter(|r| r.variant == v).collect();
            let med = |f: &dyn Fn(&AblationRow) -> Option<f64>| {
                let vals: Vec<f64> = mine.iter().filter_map(|r| f(r)).collect();
                median(&vals)
            };
            (v, med(&|r| Some(r.full)).unwrap_or(0.0), med(&|r| r.rare), med(&|r| r.non_rare))
        })
        .collect()
}

/// Markdown table with one row per variant and Full / Rare / Non-Rare
/// columns (percent).
pub fn table(rows: &[AblationRow]) -> String {
    let pct = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.2}", 100.0 * v));
    let mut out = String::from("| variant | Full | Rare | Non-Rare |\n|---|---|---|---|\n");
    for (v, full, rare, non_rare) in summarize(rows) {
        out += &format!("| {} | {} | {} | {} |\n", v.label(), pct(Some(full)), pct(rare), pct(non_rare));
    }
    out
}
