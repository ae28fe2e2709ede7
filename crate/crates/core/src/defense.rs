//! Robust aggregation and detection: norm clipping, weak differential
//! privacy, coordinate median (optionally embedding-layer-only),
//! Multi-Krum, and accuracy checking.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::metrics::accuracy;
use crate::model::{Delta, Example, ModelParams};
use crate::{Error, Result};

/// Server-side defense applied during aggregation.
#[derive(Debug, Clone, PartialEq)]
pub enum DefenseConfig {
    None,
    NormClip {
        delta: f64,
        /// When set, uses the literal rescale `w * delta / ||w||`, which
        /// also scales sub-threshold updates up. The default is a true
        /// L2-ball projection.
        literal: bool,
    },
    WeakDp {
        delta: f64,
        sigma: f64,
    },
    CoordMedian {
        embedding_only: bool,
    },
    MultiKrum {
        f_byz: usize,
        k_select: usize,
    },
    AccuracyCheck {
        tau: f64,
    },
}

impl DefenseConfig {
    pub fn validate(&self, clients_per_round: usize) -> Result<()> {
        match *self {
            DefenseConfig::None | DefenseConfig::CoordMedian { .. } => Ok(()),
            DefenseConfig::NormClip { delta, .. } => {
                if delta > 0.0 {
                    Ok(())
                } else {
                    Err(Error::Config(format!("norm-clip delta must be > 0, got {delta}")))
                }
            }
            DefenseConfig::WeakDp { delta, sigma } => {
                if delta <= 0.0 {
                    Err(Error::Config(format!("weak-dp delta must be > 0, got {delta}")))
                } else if sigma < 0.0 {
                    Err(Error::Config(format!("weak-dp sigma must be >= 0, got {sigma}")))
                } else {
                    Ok(())
                }
            }
            DefenseConfig::MultiKrum { f_byz, k_select } => {
                let m = clients_per_round;
                if m < f_byz + 3 {
                    return Err(Error::Config(format!(
                        "multi-krum needs m >= f_byz + 3 (m = {m}, f_byz = {f_byz})"
                    )));
                }
                if k_select == 0 || k_select > m - f_byz - 2 {
                    return Err(Error::Config(format!(
                        "multi-krum k_select must be in [1, m - f_byz - 2] (got {k_select})"
                    )));
                }
                Ok(())
            }
            DefenseConfig::AccuracyCheck { tau } => {
                if (0.0..=1.0).contains(&tau) {
                    Ok(())
                } else {
                    Err(Error::Config(format!("tau must be in [0, 1], got {tau}")))
                }
            }
        }
    }
}

/// Scale a residual into the L2 ball of radius `delta`.
///
/// Projection mode: `min(1, delta / ||w||)`, leaving small updates alone.
/// Literal mode: `delta / ||w||`, which also scales small updates up.
pub fn norm_clip(residual: &mut Delta, delta: f64, literal: bool) {
    let norm = residual.l2_norm();
    if norm == 0.0 {
        return;
    }
    let factor = if literal {
        delta / norm
    } else {
        (delta / norm).min(1.0)
    };
    residual.scale(factor);
}

/// Norm-clip then add i.i.d. Gaussian noise with standard deviation `sigma`
/// to every coordinate.
pub fn weak_dp<R: Rng>(residual: &mut Delta, delta: f64, sigma: f64, rng: &mut R) {
    norm_clip(residual, delta, false);
    if sigma == 0.0 {
        return;
    }
    let noise = Normal::new(0.0, sigma).expect("sigma >= 0");
    for x in residual.embedding.iter_mut() {
        *x += noise.sample(rng);
    }
    for x in residual.head_weights.iter_mut() {
        *x += noise.sample(rng);
    }
    for x in residual.head_bias.iter_mut() {
        *x += noise.sample(rng);
    }
}

fn median_of(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite residuals"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Per-coordinate median across residuals. With `embedding_only` the head
/// coordinates use the mean instead.
pub fn coord_median(residuals: &[&Delta], embedding_only: bool) -> Result<Delta> {
    let first = residuals.first().ok_or(Error::EmptyBatch)?;
    let dims = first.dims();
    let n = residuals.len();
    let mut out = Delta::zeros(dims);
    let mut buf = vec![0.0; n];

    for (idx, x) in out.embedding.iter_mut().enumerate() {
        let (r, c) = (idx / dims.hidden, idx % dims.hidden);
        for (k, res) in residuals.iter().enumerate() {
            buf[k] = res.embedding[[r, c]];
        }
        *x = median_of(&mut buf);
    }

    let head = |get: &dyn Fn(&Delta, usize) -> f64, len: usize, out: &mut [f64]| {
        for i in 0..len {
            if embedding_only {
                out[i] = residuals.iter().map(|res| get(res, i)).sum::<f64>() / n as f64;
            } else {
                let mut vals: Vec<f64> = residuals.iter().map(|res| get(res, i)).collect();
                out[i] = median_of(&mut vals);
            }
        }
    };
    let mut hw = vec![0.0; dims.hidden * dims.classes];
    head(
        &|res, i| res.head_weights[[i / dims.classes, i % dims.classes]],
        hw.len(),
        &mut hw,
    );
    out.head_weights = Array2::from_shape_vec((dims.hidden, dims.classes), hw).expect("shape");
    let mut hb = vec![0.0; dims.classes];
    head(&|res, i| res.head_bias[i], hb.len(), &mut hb);
    out.head_bias = Array1::from_vec(hb);

    Ok(out)
}

/// Multi-Krum scores and selection.
///
/// Each residual is scored by the sum of squared L2 distances to its
/// `n - f_byz - 2` nearest peers; the aggregate is the mean of the
/// `k_select` lowest-scoring residuals. Returns the aggregate and the
/// selected indices (ascending).
pub fn multi_krum(residuals: &[&Delta], f_byz: usize, k_select: usize) -> Result<(Delta, Vec<usize>)> {
    let n = residuals.len();
    if n < f_byz + 3 {
        return Err(Error::Config(format!(
            "multi-krum needs at least f_byz + 3 = {} residuals, got {n}",
            f_byz + 3
        )));
    }
    if k_select == 0 || k_select > n - f_byz - 2 {
        return Err(Error::Config(format!(
            "multi-krum k_select {k_select} out of range for n = {n}, f_byz = {f_byz}"
        )));
    }

    let neighbors = n - f_byz - 2;
    let mut dist = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = residuals[i].sq_dist(residuals[j]);
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }

    let mut scores: Vec<(f64, usize)> = (0..n)
        .map(|i| {
            let mut ds: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| dist[i][j]).collect();
            ds.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
            (ds[..neighbors].iter().sum::<f64>(), i)
        })
        .collect();
    scores.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite scores").then(a.1.cmp(&b.1)));

    let mut selected: Vec<usize> = scores[..k_select].iter().map(|&(_, i)| i).collect();
    selected.sort_unstable();

    let mut out = Delta::zeros(residuals[0].dims());
    for &i in &selected {
        out.add_scaled(residuals[i], 1.0 / k_select as f64);
    }
    Ok((out, selected))
}

/// Accept a local model unless its clean accuracy falls more than `tau`
/// below the current global model's.
pub fn accuracy_check(
    local: &ModelParams,
    global: &ModelParams,
    val: &[Example],
    tau: f64,
) -> Result<bool> {
    let local_acc = accuracy(local, val)?;
    let global_acc = accuracy(global, val)?;
    Ok(local_acc >= global_acc - tau)
}
