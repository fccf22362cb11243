use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::data::Prepared;
use super::infer::{LatentSource, Pipeline};
use super::train::write_json;
use crate::error::{Error, Result};
use crate::latent::{kl_divergence_in, GaussianLatent, KlDirection};
use crate::tensor::Tensor;

/// Mean squared error after dynamic-time-warping alignment of the rows
/// of `a` and `b`. Steps are (1,0), (0,1) and (1,1); the matched pairs'
/// per-element squared errors are averaged over the path.
pub fn dtw_mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.cols() != b.cols() {
        return Err(Error::Shape(format!("aligning {} bins against {}", a.cols(), b.cols())));
    }
    let (n, m) = (a.rows(), b.rows());
    if n == 0 || m == 0 {
        return Err(Error::EmptySequence("aligned mel"));
    }
    let cost = |i: usize, j: usize| {
        a.row_slice(i).iter().zip(b.row_slice(j)).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.cols() as f64
    };
    // (total cost, path length) per cell; ties prefer the shorter path.
    let mut acc = vec![(f64::INFINITY, 0usize); n * m];
    for i in 0..n {
        for j in 0..m {
            let best = if i == 0 && j == 0 {
                (0.0, 0)
            } else {
                let mut options = Vec::with_capacity(3);
                if i > 0 {
                    options.push(acc[(i - 1) * m + j]);
                }
                if j > 0 {
                    options.push(acc[i * m + j - 1]);
                }
                if i > 0 && j > 0 {
                    options.push(acc[(i - 1) * m + j - 1]);
                }
                options
                    .into_iter()
                    .min_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)))
                    .expect("at least one predecessor")
            };
            acc[i * m + j] = (best.0 + cost(i, j), best.1 + 1);
        }
    }
    let (total, len) = acc[n * m - 1];
    Ok(total / len as f64)
}

/// Objective metrics for one latent condition over the held-out split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionMetrics {
    pub condition: LatentSource,
    /// Mel MSE with recorded durations.
    pub teacher_mel_mse: f64,
    /// DTW-aligned mel MSE with predicted durations.
    pub free_mel_mse: f64,
    /// Frames, pooled over all tokens.
    pub duration_rmse: f64,
    /// Mean divergence of the condition's latent against the posterior.
    pub heldout_kl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub utterances: usize,
    pub conditions: Vec<ConditionMetrics>,
}

impl EvalReport {
    pub fn get(&self, c: LatentSource) -> Option<&ConditionMetrics> {
        self.conditions.iter().find(|m| m.condition == c)
    }
}

pub const CONDITIONS: [LatentSource; 3] = [LatentSource::Prior, LatentSource::Sampler, LatentSource::Oracle];

const REPORT_NOTE: &str = "objective proxies (mel MSE, duration RMSE, KL) stand in for listening tests";

fn condition_name(c: LatentSource) -> &'static str {
    match c {
        LatentSource::Prior => "prior",
        LatentSource::Sampler => "sampler",
        LatentSource::Oracle => "oracle",
    }
}

/// Every condition over `items`. Latents are point estimates, so the
/// report is a pure function of the checkpoints and data.
pub fn evaluate(pipeline: &Pipeline, items: &[Prepared], direction: KlDirection) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(Error::EmptySequence("evaluation split"));
    }
    let d = pipeline.latent_dim();
    let mut conditions = Vec::new();
    for c in CONDITIONS {
        let (mut teacher, mut free, mut sq, mut tokens, mut kl) = (0.0, 0.0, 0.0, 0usize, 0.0);
        for u in items {
            let target = pipeline.acoustic.posterior(&pipeline.store, &u.mel)?;
            let latent = match c {
                LatentSource::Prior => GaussianLatent::standard(d),
                LatentSource::Sampler => pipeline.predict_latent(u)?,
                LatentSource::Oracle => target.clone(),
            };
            kl += kl_divergence_in(&latent, &target, direction)?;
            let z = pipeline.latent(u, c, &[], 0.0)?;
            let forced = pipeline.acoustic.synthesize(&pipeline.store, &u.ids, &u.durations, &z)?;
            teacher += mse(&forced, &u.mel);
            let durations = pipeline.durations(u, &z)?;
            for (p, t) in durations.iter().zip(&u.durations) {
                sq += (*p as f64 - *t as f64).powi(2);
            }
            tokens += durations.len();
            let free_mel = pipeline.acoustic.synthesize(&pipeline.store, &u.ids, &durations, &z)?;
            free += dtw_mse(&free_mel, &u.mel)?;
        }
        let n = items.len() as f64;
        conditions.push(ConditionMetrics {
            condition: c,
            teacher_mel_mse: teacher / n,
            free_mel_mse: free / n,
            duration_rmse: (sq / tokens as f64).sqrt(),
            heldout_kl: kl / n,
        });
    }
    Ok(EvalReport {
        utterances: items.len(),
        conditions,
    })
}

fn mse(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

/// `metrics.csv`, a gnuplot-ready `metrics.dat` and `metrics.json`.
pub fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let mut csv = String::from("condition,teacher_mel_mse,free_mel_mse,duration_rmse,heldout_kl\n");
    let mut dat = format!(
        "# {REPORT_NOTE}\n# {} held-out utterances\n# index condition teacher_mel_mse free_mel_mse duration_rmse heldout_kl\n",
        report.utterances
    );
    for (k, m) in report.conditions.iter().enumerate() {
        let name = condition_name(m.condition);
        let row = [m.teacher_mel_mse, m.free_mel_mse, m.duration_rmse, m.heldout_kl];
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(csv, "{name},{}", cells.join(",")).expect("string write");
        writeln!(dat, "{k} {name} {}", cells.join(" ")).expect("string write");
    }
    for (file, text) in [("metrics.csv", csv), ("metrics.dat", dat)] {
        let path = dir.join(file);
        fs::write(&path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    }
    write_json(&dir.join("metrics.json"), report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(v: &[f64]) -> Tensor {
        Tensor::matrix(v.len(), 1, v.to_vec()).unwrap()
    }

    #[test]
    fn dtw_of_identical_sequences_is_zero() {
        let a = rows(&[1.0, 2.0, 3.0]);
        assert_eq!(dtw_mse(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn dtw_absorbs_repeated_frames() {
        let a = rows(&[1.0, 2.0, 3.0]);
        let b = rows(&[1.0, 1.0, 2.0, 3.0, 3.0]);
        assert_eq!(dtw_mse(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn dtw_hand_example() {
        // Diagonal path [0 vs 1], [1 vs 1] has cost 1 + 0 over 2 steps.
        let a = rows(&[0.0, 1.0]);
        let b = rows(&[1.0, 1.0]);
        assert_eq!(dtw_mse(&a, &b).unwrap(), 0.5);
        let c = rows(&[5.0]);
        assert_eq!(dtw_mse(&c, &rows(&[3.0, 7.0])).unwrap(), 4.0);
    }
}
