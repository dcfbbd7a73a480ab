//! Trains and scores the four toggle combinations of DeepKAN and the KAN decoder FFN.

use std::fmt;
use std::path::PathBuf;

use crate::dataset::{Dataset, Split};
use crate::error::Result;
use crate::model::{Model, ModelConfig, Variant};
use crate::trainer::{evaluate_tiles, train_loop, TrainConfig, TrainOptions};

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: Variant,
    pub params: usize,
    /// Mean training loss of the first and last epochs.
    pub first_loss: f64,
    pub final_loss: f64,
    pub mf1: f64,
    pub miou: f64,
}

#[derive(Debug, Clone)]
pub struct Ablation {
    pub rows: Vec<AblationRow>,
}

impl Ablation {
    /// Variants sorted by descending test mIoU; ties keep the enumeration order.
    pub fn ranking(&self) -> Vec<Variant> {
        let mut rows: Vec<&AblationRow> = self.rows.iter().collect();
        rows.sort_by(|a, b| b.miou.total_cmp(&a.miou));
        rows.into_iter().map(|r| r.variant).collect()
    }

    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<10} {:>8} {:>8} {:>12} {:>10} {:>10} {:>8} {:>8}",
            "variant", "deepkan", "glkan", "params", "first loss", "last loss", "mF1", "mIoU"
        )?;
        for r in &self.rows {
            let (dk, gl) = r.variant.flags();
            let mark = |b: bool| if b { "yes" } else { "no" };
            writeln!(
                f,
                "{:<10} {:>8} {:>8} {:>12} {:>10.5} {:>10.5} {:>8.4} {:>8.4}",
                r.variant.name(),
                mark(dk),
                mark(gl),
                r.params,
                r.first_loss,
                r.final_loss,
                r.mf1,
                r.miou
            )?;
        }
        let order: Vec<&str> = self.ranking().into_iter().map(Variant::name).collect();
        write!(f, "ranking by mIoU: {}", order.join(" > "))
    }
}

/// Trains every variant from the same seed and scores it on the test split.
///
/// When `out_dir` is set each variant writes its logs and checkpoints to a
/// subdirectory named after the variant.
pub fn run(
    base: &ModelConfig,
    data: &Dataset,
    train: &TrainConfig,
    seed: u64,
    out_dir: Option<PathBuf>,
    verbose: bool,
) -> Result<Ablation> {
    let mut train = train.clone();
    train.eval_each_epoch = false;
    let test = data.split(Split::Test);
    let mut rows = Vec::with_capacity(Variant::ALL.len());
    for variant in Variant::ALL {
        let cfg = base.clone().with_variant(variant);
        let mut model = Model::new(cfg, seed)?;
        let opts = TrainOptions { out_dir: out_dir.as_ref().map(|d| d.join(variant.name())), verbose };
        let outcome = train_loop(&mut model, data, &train, seed, &opts)?;
        let means = evaluate_tiles(&model, &test, data.manifest.patch, data.manifest.test_stride)?.report().means()?;
        rows.push(AblationRow {
            variant,
            params: model.num_params(),
            first_loss: outcome.epochs.first().map_or(f64::NAN, |e| e.loss),
            final_loss: outcome.epochs.last().map_or(f64::NAN, |e| e.loss),
            mf1: means.mf1,
            miou: means.miou,
        });
    }
    Ok(Ablation { rows })
}
